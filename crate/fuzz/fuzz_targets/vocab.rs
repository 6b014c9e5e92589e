#![no_main]

use kdslu_core::text_pipeline::CharVocab;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(v) = CharVocab::parse(text) {
            assert_eq!(CharVocab::parse(&v.to_file_string()).unwrap(), v);
        }
    }
});

#![no_main]

use kdslu_core::tokenizer_vq::Codebook;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cb) = Codebook::from_bytes(data) {
        assert_eq!(Codebook::from_bytes(&cb.to_bytes()).unwrap().checksum(), cb.checksum());
    }
});

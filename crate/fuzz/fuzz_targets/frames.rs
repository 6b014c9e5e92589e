#![no_main]

use kdslu_core::data_harness::manifest::frames_from_bytes;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Some((&dim, rest)) = data.split_first() {
        let _ = frames_from_bytes(rest, dim as usize % 32);
    }
});

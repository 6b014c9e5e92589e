#![no_main]

use kdslu_core::data_harness::manifest::{parse_manifest, render_manifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(m) = parse_manifest(text) else { return };
    // Rows with stray control characters parse but refuse to render.
    let Ok(again) = render_manifest(&m) else { return };
    let back = parse_manifest(&again).expect("rendered manifest parses");
    assert_eq!(back.format, m.format);
    assert_eq!(back.rows.len(), m.rows.len());
    for (a, b) in back.rows.iter().zip(&m.rows) {
        assert_eq!((&a.signal_path, &a.transcript, a.intent, a.speaker, a.split), (&b.signal_path, &b.transcript, b.intent, b.speaker, b.split));
    }
});

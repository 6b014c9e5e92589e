#![no_main]

use kdslu::report::{parse_metric_line, read_metric_lines};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_metric_line(text);
        let _ = read_metric_lines(text);
    }
});

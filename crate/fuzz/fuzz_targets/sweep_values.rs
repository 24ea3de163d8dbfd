#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(values) = sled_cli::parse_values(text) {
            assert!(values.iter().all(|v| v.is_finite()));
        }
    }
});

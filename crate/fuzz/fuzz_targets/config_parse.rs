#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = sled_cli::parse_config(text) {
            assert!(sled_cli::validate(&cfg).is_ok());
        }
    }
});

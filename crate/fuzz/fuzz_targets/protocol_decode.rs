#![no_main]

use libfuzzer_sys::fuzz_target;
use sled_core::protocol::{decode, encode, DecodeError};

fuzz_target!(|data: &[u8]| {
    match decode(data) {
        Ok((msg, used)) => {
            assert!(used <= data.len());
            let again = encode(&msg).expect("decoded messages re-encode");
            assert_eq!(&again[..], &data[..used]);
        }
        Err(DecodeError::Truncated) | Err(DecodeError::Malformed(_)) => {}
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use sled_core::protocol::{decode, encode, FrameDecoder};

// First byte picks the chunk size the stream is fed in.
fuzz_target!(|data: &[u8]| {
    let Some((&split, body)) = data.split_first() else {
        return;
    };
    let chunk = usize::from(split).max(1);
    let mut dec = FrameDecoder::new();
    let mut got = Vec::new();
    'feed: for part in body.chunks(chunk) {
        dec.push(part);
        loop {
            match dec.next_message() {
                Ok(Some(m)) => got.push(m),
                Ok(None) => break,
                Err(_) => break 'feed,
            }
        }
    }
    // Whatever the stream decoder produced, one-shot decoding agrees.
    let mut rest = body;
    for m in got {
        let (one, used) = decode(rest).expect("stream and one-shot decoders agree");
        // Bytes, not values: probabilities may be NaN.
        assert_eq!(encode(&one).unwrap(), encode(&m).unwrap());
        rest = &rest[used..];
    }
});

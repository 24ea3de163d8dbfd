#![no_main]

use libfuzzer_sys::fuzz_target;
use sled_core::models::Tokenizer;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(tok) = Tokenizer::from_vocab_text(text) else {
        return;
    };
    let body = text.strip_suffix('\n').unwrap_or(text);
    for (i, line) in body.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        assert_eq!(tok.token_id(line).map(|t| t.index()), Some(i));
    }
    if let Ok(ids) = tok.encode(text) {
        assert!(ids.iter().all(|t| t.index() < tok.vocab_size()));
    }
});

//! Replays the checked-in fuzz corpus through the same checks the fuzz
//! targets make.

use std::fs;
use std::path::PathBuf;

use sled_core::models::Tokenizer;
use sled_core::protocol::{decode, encode, FrameDecoder};

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus for {target}");
    out
}

#[test]
fn protocol_decode_seeds() {
    let mut decoded = 0;
    for (name, data) in corpus("protocol_decode") {
        if let Ok((msg, used)) = decode(&data) {
            assert_eq!(encode(&msg).unwrap(), data[..used], "{name}");
            decoded += 1;
        }
    }
    assert_eq!(decoded, 6);
}

#[test]
fn protocol_stream_seeds() {
    for (name, data) in corpus("protocol_stream") {
        let (&split, body) = data.split_first().unwrap();
        let mut dec = FrameDecoder::new();
        let mut got = Vec::new();
        'feed: for part in body.chunks(usize::from(split).max(1)) {
            dec.push(part);
            loop {
                match dec.next_message() {
                    Ok(Some(m)) => got.push(m),
                    Ok(None) => break,
                    Err(_) => break 'feed,
                }
            }
        }
        assert!(!got.is_empty(), "{name}");
        let mut rest = body;
        for m in got {
            let (one, used) = decode(rest).unwrap();
            assert_eq!(encode(&one).unwrap(), encode(&m).unwrap(), "{name}");
            rest = &rest[used..];
        }
    }
}

#[test]
fn config_seeds() {
    let mut accepted = Vec::new();
    for (name, data) in corpus("config_parse") {
        let text = std::str::from_utf8(&data).unwrap();
        if let Ok(cfg) = sled_cli::parse_config(text) {
            sled_cli::validate(&cfg).unwrap();
            accepted.push(name);
        }
    }
    assert_eq!(
        accepted,
        ["default", "empty", "loss_sweep", "seed_only", "threshold"]
    );
}

#[test]
fn vocab_seeds() {
    let mut accepted = 0;
    for (name, data) in corpus("vocab_parse") {
        let text = std::str::from_utf8(&data).unwrap();
        let Ok(tok) = Tokenizer::from_vocab_text(text) else {
            continue;
        };
        accepted += 1;
        let body = text.strip_suffix('\n').unwrap_or(text);
        for (i, line) in body.split('\n').enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            assert_eq!(tok.token_id(line).map(|t| t.index()), Some(i), "{name}");
        }
    }
    assert_eq!(accepted, 4);
}

#[test]
fn sweep_value_seeds() {
    let mut accepted = Vec::new();
    for (name, data) in corpus("sweep_values") {
        if let Ok(values) = sled_cli::parse_values(std::str::from_utf8(&data).unwrap()) {
            assert!(values.iter().all(|v| v.is_finite()));
            accepted.push(name);
        }
    }
    assert_eq!(accepted, ["gamma", "loss", "trailing_comma"]);
}

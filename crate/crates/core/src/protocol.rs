//! Device/server wire format.
//!
//! Every message travels in a frame: a big-endian `u32` body length, then
//! the body. The body starts with a type byte.
//!
//! | type | message          | payload                                                                                     |
//! |------|------------------|---------------------------------------------------------------------------------------------|
//! | 0x01 | `SessionInit`    | `session_id u64`, token list, text `draft_model_name`                                      |
//! | 0x02 | `VerifyRequest`  | `session_id u64`, `request_id u64`, `base_position u64`, token list, one `f64` per token   |
//! | 0x03 | `VerifyResponse` | `session_id u64`, `request_id u64`, `accepted_count u16`, flag `has_corrective`, `corrective_token u32` |
//! | 0x04 | `SessionClose`   | `session_id u64`                                                                            |
//!
//! Integers are big-endian and fixed width. A token list is a `u16` count
//! followed by one `u32` per token; probabilities are IEEE-754 binary64,
//! big-endian, one per token with no separate count. Text is a `u16` byte
//! length followed by UTF-8. Flags are one byte, 0 or 1; when the flag is 0
//! the corrective token field must be 0.

use thiserror::Error;

use crate::specdec::TokenId;

pub const TYPE_SESSION_INIT: u8 = 0x01;
pub const TYPE_VERIFY_REQUEST: u8 = 0x02;
pub const TYPE_VERIFY_RESPONSE: u8 = 0x03;
pub const TYPE_SESSION_CLOSE: u8 = 0x04;

pub const FRAME_HEADER_LEN: usize = 4;
/// Largest body any valid message can have (a full `VerifyRequest`).
pub const MAX_BODY_LEN: usize = 1 + 8 + 8 + 8 + 2 + 12 * u16::MAX as usize;
/// Body size of a `VerifyRequest` without its per-token payload.
pub const VERIFY_REQUEST_FIXED_LEN: usize = 1 + 8 + 8 + 8 + 2;
pub const VERIFY_RESPONSE_BODY_LEN: usize = 1 + 8 + 8 + 2 + 1 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyRequest {
    pub session_id: u64,
    pub request_id: u64,
    /// Length of the committed context this block extends.
    pub base_position: u64,
    pub tokens: Vec<TokenId>,
    pub draft_probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyResponse {
    pub session_id: u64,
    pub request_id: u64,
    pub accepted_count: u16,
    pub corrective_token: Option<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    SessionInit {
        session_id: u64,
        prompt_tokens: Vec<TokenId>,
        draft_model_name: String,
    },
    VerifyRequest(VerifyRequest),
    VerifyResponse(VerifyResponse),
    SessionClose {
        session_id: u64,
    },
}

impl Message {
    pub fn session_id(&self) -> u64 {
        match self {
            Message::SessionInit { session_id, .. } | Message::SessionClose { session_id } => {
                *session_id
            }
            Message::VerifyRequest(r) => r.session_id,
            Message::VerifyResponse(r) => r.session_id,
        }
    }

    pub fn type_byte(&self) -> u8 {
        match self {
            Message::SessionInit { .. } => TYPE_SESSION_INIT,
            Message::VerifyRequest(_) => TYPE_VERIFY_REQUEST,
            Message::VerifyResponse(_) => TYPE_VERIFY_RESPONSE,
            Message::SessionClose { .. } => TYPE_SESSION_CLOSE,
        }
    }

    /// Encoded frame size in bytes, header included.
    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_LEN
            + match self {
                Message::SessionInit {
                    prompt_tokens,
                    draft_model_name,
                    ..
                } => 1 + 8 + 2 + 4 * prompt_tokens.len() + 2 + draft_model_name.len(),
                Message::VerifyRequest(r) => VERIFY_REQUEST_FIXED_LEN + 12 * r.tokens.len(),
                Message::VerifyResponse(_) => VERIFY_RESPONSE_BODY_LEN,
                Message::SessionClose { .. } => 1 + 8,
            }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("list of {len} entries exceeds the u16 limit")]
    OversizeList { len: usize },
    #[error("invalid message: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    /// More bytes are needed; not an error on a stream.
    #[error("incomplete frame")]
    Truncated,
    /// The stream is corrupt and the connection must be dropped.
    #[error("malformed frame: {0}")]
    Malformed(String),
}

fn list_len(len: usize) -> Result<u16, EncodeError> {
    u16::try_from(len).map_err(|_| EncodeError::OversizeList { len })
}

/// Encodes `msg` as one frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(msg.encoded_len());
    encode_into(msg, &mut out)?;
    Ok(out)
}

/// Appends one frame for `msg` to `out`. On error `out` is left unchanged.
pub fn encode_into(msg: &Message, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    let start = out.len();
    out.extend_from_slice(&[0; FRAME_HEADER_LEN]);
    out.push(msg.type_byte());
    let result = write_payload(msg, out);
    if let Err(e) = result {
        out.truncate(start);
        return Err(e);
    }
    let body_len = (out.len() - start - FRAME_HEADER_LEN) as u32;
    out[start..start + FRAME_HEADER_LEN].copy_from_slice(&body_len.to_be_bytes());
    Ok(())
}

fn write_tokens(tokens: &[TokenId], out: &mut Vec<u8>) -> Result<(), EncodeError> {
    out.extend_from_slice(&list_len(tokens.len())?.to_be_bytes());
    for t in tokens {
        out.extend_from_slice(&t.0.to_be_bytes());
    }
    Ok(())
}

fn write_payload(msg: &Message, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    match msg {
        Message::SessionInit {
            session_id,
            prompt_tokens,
            draft_model_name,
        } => {
            out.extend_from_slice(&session_id.to_be_bytes());
            write_tokens(prompt_tokens, out)?;
            out.extend_from_slice(&list_len(draft_model_name.len())?.to_be_bytes());
            out.extend_from_slice(draft_model_name.as_bytes());
        }
        Message::VerifyRequest(r) => {
            if r.tokens.is_empty() {
                return Err(EncodeError::Invalid("verify request without tokens".into()));
            }
            if r.tokens.len() != r.draft_probs.len() {
                return Err(EncodeError::Invalid(format!(
                    "{} tokens but {} probabilities",
                    r.tokens.len(),
                    r.draft_probs.len()
                )));
            }
            out.extend_from_slice(&r.session_id.to_be_bytes());
            out.extend_from_slice(&r.request_id.to_be_bytes());
            out.extend_from_slice(&r.base_position.to_be_bytes());
            write_tokens(&r.tokens, out)?;
            for p in &r.draft_probs {
                out.extend_from_slice(&p.to_bits().to_be_bytes());
            }
        }
        Message::VerifyResponse(r) => {
            out.extend_from_slice(&r.session_id.to_be_bytes());
            out.extend_from_slice(&r.request_id.to_be_bytes());
            out.extend_from_slice(&r.accepted_count.to_be_bytes());
            out.push(u8::from(r.corrective_token.is_some()));
            out.extend_from_slice(&r.corrective_token.map_or(0, |t| t.0).to_be_bytes());
        }
        Message::SessionClose { session_id } => {
            out.extend_from_slice(&session_id.to_be_bytes());
        }
    }
    Ok(())
}

/// Bounds-checked reader over one frame body.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(DecodeError::Malformed(format!(
                "body ends at byte {} but {} more bytes are needed",
                self.buf.len(),
                n
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn tokens(&mut self) -> Result<Vec<TokenId>, DecodeError> {
        let n = self.u16()? as usize;
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| TokenId(u32::from_be_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }

    fn text(&mut self) -> Result<String, DecodeError> {
        let n = self.u16()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| DecodeError::Malformed("text is not valid UTF-8".into()))
    }

    fn finish(&self) -> Result<(), DecodeError> {
        if self.pos != self.buf.len() {
            return Err(DecodeError::Malformed(format!(
                "{} trailing bytes in frame body",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Decodes the first frame in `bytes`, returning the message and the number
/// of bytes the frame occupied.
pub fn decode(bytes: &[u8]) -> Result<(Message, usize), DecodeError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(DecodeError::Truncated);
    }
    let body_len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if body_len == 0 {
        return Err(DecodeError::Malformed("empty frame body".into()));
    }
    if body_len > MAX_BODY_LEN {
        return Err(DecodeError::Malformed(format!(
            "frame body of {body_len} bytes exceeds {MAX_BODY_LEN}"
        )));
    }
    let total = FRAME_HEADER_LEN + body_len;
    if bytes.len() < total {
        return Err(DecodeError::Truncated);
    }
    let mut r = Reader {
        buf: &bytes[FRAME_HEADER_LEN..total],
        pos: 0,
    };
    let msg = match r.u8()? {
        TYPE_SESSION_INIT => {
            let session_id = r.u64()?;
            let prompt_tokens = r.tokens()?;
            let draft_model_name = r.text()?;
            Message::SessionInit {
                session_id,
                prompt_tokens,
                draft_model_name,
            }
        }
        TYPE_VERIFY_REQUEST => {
            let session_id = r.u64()?;
            let request_id = r.u64()?;
            let base_position = r.u64()?;
            let tokens = r.tokens()?;
            if tokens.is_empty() {
                return Err(DecodeError::Malformed(
                    "verify request without tokens".into(),
                ));
            }
            let raw = r.take(8 * tokens.len())?;
            let draft_probs = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_be_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            Message::VerifyRequest(VerifyRequest {
                session_id,
                request_id,
                base_position,
                tokens,
                draft_probs,
            })
        }
        TYPE_VERIFY_RESPONSE => {
            let session_id = r.u64()?;
            let request_id = r.u64()?;
            let accepted_count = r.u16()?;
            let flag = r.u8()?;
            let token = r.u32()?;
            let corrective_token = match (flag, token) {
                (0, 0) => None,
                (0, _) => {
                    return Err(DecodeError::Malformed(
                        "corrective token set without has_corrective".into(),
                    ))
                }
                (1, t) => Some(TokenId(t)),
                (f, _) => return Err(DecodeError::Malformed(format!("flag byte {f:#04x}"))),
            };
            Message::VerifyResponse(VerifyResponse {
                session_id,
                request_id,
                accepted_count,
                corrective_token,
            })
        }
        TYPE_SESSION_CLOSE => Message::SessionClose {
            session_id: r.u64()?,
        },
        other => {
            return Err(DecodeError::Malformed(format!(
                "unknown type byte {other:#04x}"
            )))
        }
    };
    r.finish()?;
    Ok((msg, total))
}

/// Incremental decoder for a byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, `Ok(None)` if more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<Message>, DecodeError> {
        match decode(&self.buf) {
            Ok((msg, used)) => {
                self.buf.drain(..used);
                Ok(Some(msg))
            }
            Err(DecodeError::Truncated) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

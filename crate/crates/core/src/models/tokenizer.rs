use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::specdec::TokenId;

pub const EOS_TEXT: &str = "<eos>";
pub const UNK_TEXT: &str = "<unk>";

/// Hex SHA-256 of a vocabulary's canonical text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenizerId(String);

impl TokenizerId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TokenizerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0[..12.min(self.0.len())])
    }
}

/// Whitespace tokenizer with a per-character fallback.
///
/// Each whitespace-separated word maps to its own id when the vocabulary
/// lists it; otherwise it is split into characters, each of which must be in
/// the vocabulary (or map to `<unk>` if present).
#[derive(Debug, Clone)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    id: TokenizerId,
}

impl Tokenizer {
    /// Parses a vocabulary file body: one token per line, id = line number.
    pub fn from_vocab_text(text: &str) -> Result<Self, ModelError> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        if body.is_empty() {
            return Err(ModelError::InvalidVocabulary("no tokens".into()));
        }
        let tokens: Vec<String> = body
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l).to_owned())
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_vocab_text(&text)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, ModelError> {
        if tokens.len() > u32::MAX as usize {
            return Err(ModelError::InvalidVocabulary("too many tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(ModelError::InvalidVocabulary(format!("line {i} is empty")));
            }
            if t.chars().any(char::is_whitespace) {
                return Err(ModelError::InvalidVocabulary(format!(
                    "line {i} contains whitespace"
                )));
            }
            if index.insert(t.clone(), TokenId(i as u32)).is_some() {
                return Err(ModelError::InvalidVocabulary(format!(
                    "duplicate token {t:?} on line {i}"
                )));
            }
        }
        let mut h = Sha256::new();
        for t in &tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        let id = TokenizerId(hex::encode(h.finalize()));
        Ok(Self { tokens, index, id })
    }

    /// `<eos>`, `<unk>`, then `t2`, `t3`, ... up to `vocab` entries.
    pub fn synthetic(vocab: usize) -> Self {
        let tokens = (0..vocab)
            .map(|i| match i {
                0 => EOS_TEXT.to_owned(),
                1 => UNK_TEXT.to_owned(),
                _ => format!("t{i}"),
            })
            .collect();
        Self::from_tokens(tokens).expect("synthetic vocabulary is valid")
    }

    /// Character vocabulary of a corpus, sorted by code point.
    pub fn from_corpus_chars(text: &str) -> Result<Self, ModelError> {
        let chars: BTreeSet<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
        if chars.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        Self::from_tokens(chars.into_iter().map(String::from).collect())
    }

    pub fn id(&self) -> &TokenizerId {
        &self.id
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_id(&self, text: &str) -> Option<TokenId> {
        self.index.get(text).copied()
    }

    pub fn token_text(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    pub fn eos(&self) -> Option<TokenId> {
        self.token_id(EOS_TEXT)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, ModelError> {
        let unk = self.token_id(UNK_TEXT);
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if let Some(id) = self.token_id(word) {
                out.push(id);
                continue;
            }
            let mut buf = [0u8; 4];
            for ch in word.chars() {
                match self.token_id(ch.encode_utf8(&mut buf)).or(unk) {
                    Some(id) => out.push(id),
                    None => return Err(ModelError::UnknownToken(ch.to_string())),
                }
            }
        }
        Ok(out)
    }

    /// Space-joined token texts; unknown ids render as `<?id>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|id| {
                self.token_text(*id)
                    .map(str::to_owned)
                    .unwrap_or_else(|| format!("<?{id}>"))
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_file_ids_are_line_numbers() {
        let t = Tokenizer::from_vocab_text("a\nb\nhello\n").unwrap();
        assert_eq!(t.vocab_size(), 3);
        assert_eq!(t.token_id("hello"), Some(TokenId(2)));
        assert_eq!(
            t.encode("hello ab").unwrap(),
            vec![TokenId(2), TokenId(0), TokenId(1)]
        );
    }

    #[test]
    fn identical_content_identical_id() {
        let a = Tokenizer::from_vocab_text("a\nb\n").unwrap();
        let b = Tokenizer::from_vocab_text("a\r\nb").unwrap();
        let c = Tokenizer::from_vocab_text("b\na\n").unwrap();
        assert_eq!(a.id(), b.id());
        assert_ne!(a.id(), c.id());
    }

    #[test]
    fn rejects_bad_vocabularies() {
        assert!(Tokenizer::from_vocab_text("").is_err());
        assert!(Tokenizer::from_vocab_text("a\na\n").is_err());
        assert!(Tokenizer::from_vocab_text("a\n\nb\n").is_err());
        assert!(Tokenizer::from_vocab_text("a b\n").is_err());
    }

    #[test]
    fn unknown_chars() {
        let t = Tokenizer::from_vocab_text("a\nb\n").unwrap();
        assert!(matches!(t.encode("abc"), Err(ModelError::UnknownToken(_))));
        let s = Tokenizer::synthetic(5);
        assert_eq!(
            s.encode("t3 zz").unwrap(),
            vec![TokenId(3), TokenId(1), TokenId(1)]
        );
        assert_eq!(s.eos(), Some(TokenId(0)));
        assert_eq!(s.decode(&[TokenId(3), TokenId(9)]), "t3 <?9>");
    }

    #[test]
    fn corpus_chars_sorted() {
        let t = Tokenizer::from_corpus_chars("ba ab").unwrap();
        assert_eq!(t.token_id("a"), Some(TokenId(0)));
        assert_eq!(t.token_id("b"), Some(TokenId(1)));
        assert!(matches!(
            Tokenizer::from_corpus_chars("  "),
            Err(ModelError::EmptyCorpus)
        ));
    }
}

use std::collections::HashMap;
use std::path::Path;

use super::{LanguageModel, ModelError, ModelProfile, Tokenizer, TokenizerId};
use crate::specdec::{check_tokens, ProbVector, SpecError, TokenId};

/// Additively smoothed n-gram model.
///
/// Counts are kept for every order up to `order`, so a context shorter than
/// `order - 1` tokens is answered from the longest history it has.
#[derive(Debug, Clone)]
pub struct NgramModel {
    order: usize,
    delta: f64,
    vocab: usize,
    // counts[k] maps a history of length k to next-token counts.
    counts: Vec<HashMap<Vec<TokenId>, Vec<u64>>>,
    profile: ModelProfile,
    tokenizer: TokenizerId,
}

impl NgramModel {
    pub fn from_tokens(
        tokens: &[TokenId],
        tokenizer: &Tokenizer,
        order: usize,
        delta: f64,
    ) -> Result<Self, ModelError> {
        if order == 0 {
            return Err(ModelError::InvalidParameter("order must be >= 1".into()));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(ModelError::InvalidParameter("delta must be > 0".into()));
        }
        if tokens.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        let vocab = tokenizer.vocab_size();
        check_tokens(tokens, vocab)?;
        let mut counts: Vec<HashMap<Vec<TokenId>, Vec<u64>>> = vec![HashMap::new(); order];
        for (j, &next) in tokens.iter().enumerate() {
            for (k, table) in counts.iter_mut().enumerate() {
                if k > j {
                    break;
                }
                let row = table
                    .entry(tokens[j - k..j].to_vec())
                    .or_insert_with(|| vec![0; vocab]);
                row[next.index()] += 1;
            }
        }
        Ok(Self {
            order,
            delta,
            vocab,
            counts,
            profile: ModelProfile::unprofiled(format!("ngram-{order}")),
            tokenizer: tokenizer.id().clone(),
        })
    }

    pub fn with_profile(mut self, profile: ModelProfile) -> Self {
        self.profile = profile;
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Raw count of `gram` (history followed by the next token).
    pub fn count(&self, gram: &[TokenId]) -> u64 {
        let Some((last, history)) = gram.split_last() else {
            return 0;
        };
        self.counts
            .get(history.len())
            .and_then(|t| t.get(history))
            .and_then(|row| row.get(last.index()))
            .copied()
            .unwrap_or(0)
    }
}

/// Trains a model on a UTF-8 corpus file using `tokenizer`.
pub fn train_ngram(
    corpus_path: impl AsRef<Path>,
    tokenizer: &Tokenizer,
    order: usize,
    delta: f64,
) -> Result<NgramModel, ModelError> {
    let path = corpus_path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let tokens = tokenizer.encode(&text)?;
    NgramModel::from_tokens(&tokens, tokenizer, order, delta)
}

impl LanguageModel for NgramModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<ProbVector, SpecError> {
        check_tokens(context, self.vocab)?;
        let k = (self.order - 1).min(context.len());
        let history = &context[context.len() - k..];
        let denom_extra = self.delta * self.vocab as f64;
        let probs = match self.counts[k].get(history) {
            Some(row) => {
                let total: u64 = row.iter().sum();
                let denom = total as f64 + denom_extra;
                row.iter()
                    .map(|c| (*c as f64 + self.delta) / denom)
                    .collect()
            }
            None => vec![1.0 / self.vocab as f64; self.vocab],
        };
        ProbVector::new(probs)
    }

    fn profile(&self) -> &ModelProfile {
        &self.profile
    }

    fn tokenizer_id(&self) -> &TokenizerId {
        &self.tokenizer
    }
}

//! Language models shared by drafters and the verifier.
//!
//! Every model is deterministic in its context; randomness only enters
//! through the [`UniformSource`] handed to [`sample_token`].

mod ngram;
mod seeded;
mod tokenizer;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::UniformSource;
use crate::specdec::{ProbVector, SpecError, TokenId};

pub use ngram::{train_ngram, NgramModel};
pub use seeded::{SeededCategoricalModel, SeededConfig};
pub use tokenizer::{Tokenizer, TokenizerId, EOS_TEXT, UNK_TEXT};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("no token for {0:?} and vocabulary has no <unk>")]
    UnknownToken(String),
    #[error("tokenizer mismatch: {left} uses {left_id}, {right} uses {right_id}")]
    TokenizerMismatch {
        left: String,
        left_id: TokenizerId,
        right: String,
        right_id: TokenizerId,
    },
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
}

/// Weight precision a profile was calibrated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum QuantBits {
    Q16,
    Q8,
    Q4,
}

impl QuantBits {
    pub const ALL: [QuantBits; 3] = [QuantBits::Q16, QuantBits::Q8, QuantBits::Q4];

    pub fn bits(self) -> u8 {
        match self {
            QuantBits::Q16 => 16,
            QuantBits::Q8 => 8,
            QuantBits::Q4 => 4,
        }
    }
}

impl TryFrom<u8> for QuantBits {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            16 => Ok(QuantBits::Q16),
            8 => Ok(QuantBits::Q8),
            4 => Ok(QuantBits::Q4),
            other => Err(format!("quantization must be 16, 8 or 4 bits, got {other}")),
        }
    }
}

impl From<QuantBits> for u8 {
    fn from(q: QuantBits) -> u8 {
        q.bits()
    }
}

impl fmt::Display for QuantBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-bit", self.bits())
    }
}

/// Performance envelope of a model on its host. These are calibration
/// inputs for the simulator, not measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub tokens_per_second: f64,
    pub watts_avg: f64,
    pub quant_bits: QuantBits,
}

impl ModelProfile {
    pub fn new(
        name: impl Into<String>,
        tokens_per_second: f64,
        watts_avg: f64,
        quant_bits: QuantBits,
    ) -> Result<Self, ModelError> {
        if !(tokens_per_second > 0.0 && tokens_per_second.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "tokens_per_second must be > 0, got {tokens_per_second}"
            )));
        }
        if !(watts_avg >= 0.0 && watts_avg.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "watts_avg must be >= 0, got {watts_avg}"
            )));
        }
        Ok(Self {
            name: name.into(),
            tokens_per_second,
            watts_avg,
            quant_bits,
        })
    }

    /// Placeholder profile for analysis-only models.
    pub fn unprofiled(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            tokens_per_second: 1.0,
            watts_avg: 0.0,
            quant_bits: QuantBits::Q16,
        }
    }
}

/// Next-token distribution capability shared by draft and target models.
pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Deterministic in `context`. Fails with `VocabMismatch` when a context
    /// token is outside the vocabulary.
    fn next_distribution(&self, context: &[TokenId]) -> Result<ProbVector, SpecError>;

    fn profile(&self) -> &ModelProfile;

    /// Content hash of the vocabulary this model reads and writes.
    fn tokenizer_id(&self) -> &TokenizerId;

    fn name(&self) -> &str {
        &self.profile().name
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Arc<M> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn next_distribution(&self, context: &[TokenId]) -> Result<ProbVector, SpecError> {
        (**self).next_distribution(context)
    }
    fn profile(&self) -> &ModelProfile {
        (**self).profile()
    }
    fn tokenizer_id(&self) -> &TokenizerId {
        (**self).tokenizer_id()
    }
}

/// Draws a token by inverse CDF over ascending ids with one uniform; the
/// confidence is the drawn token's probability.
pub fn sample_token(
    model: &dyn LanguageModel,
    context: &[TokenId],
    rng: &mut dyn UniformSource,
) -> Result<(TokenId, f64), SpecError> {
    let dist = model.next_distribution(context)?;
    let tok = dist.sample_with(rng.next_uniform());
    Ok((tok, dist.prob(tok)))
}

/// Models may be paired only if they share a byte-identical vocabulary.
pub fn ensure_same_tokenizer(
    a: &dyn LanguageModel,
    b: &dyn LanguageModel,
) -> Result<(), ModelError> {
    if a.tokenizer_id() != b.tokenizer_id() || a.vocab_size() != b.vocab_size() {
        return Err(ModelError::TokenizerMismatch {
            left: a.name().to_owned(),
            left_id: a.tokenizer_id().clone(),
            right: b.name().to_owned(),
            right_id: b.tokenizer_id().clone(),
        });
    }
    Ok(())
}

/// A context-free model: the same distribution at every step.
#[derive(Debug, Clone)]
pub struct StaticModel {
    probs: ProbVector,
    profile: ModelProfile,
    tokenizer: TokenizerId,
}

impl StaticModel {
    pub fn new(name: &str, probs: ProbVector) -> Self {
        let tokenizer = Tokenizer::synthetic(probs.len()).id().clone();
        Self {
            probs,
            profile: ModelProfile::unprofiled(name),
            tokenizer,
        }
    }

    pub fn with_profile(mut self, profile: ModelProfile) -> Self {
        self.profile = profile;
        self
    }

    pub fn probs(&self) -> &ProbVector {
        &self.probs
    }
}

impl LanguageModel for StaticModel {
    fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<ProbVector, SpecError> {
        crate::specdec::check_tokens(context, self.probs.len())?;
        Ok(self.probs.clone())
    }

    fn profile(&self) -> &ModelProfile {
        &self.profile
    }

    fn tokenizer_id(&self) -> &TokenizerId {
        &self.tokenizer
    }
}

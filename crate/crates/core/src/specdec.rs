//! Speculative sampling primitives.
//!
//! A drafted token `x` with draft probability `q(x)` is accepted with
//! probability `min(1, p(x) / q(x))`, where `p` is the target distribution at
//! the same position. On rejection a corrective token is drawn from the
//! normalized positive part of `p - q`. Together these make the committed
//! tokens follow `p` exactly, whatever `q` is.
//!
//! Verification here never samples a bonus token after a fully accepted
//! block: the committed prefix after full acceptance is exactly the drafted
//! tokens, which lets a device keep drafting ahead of an in-flight request.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::LanguageModel;
use crate::rng::UniformSource;

/// Sum tolerance after construction.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;
/// Inputs within this distance of summing to one are renormalized.
pub const RENORMALIZE_WINDOW: f64 = 1e-6;
/// Entrywise tolerance under which target and draft count as identical.
pub const IDENTICAL_TOLERANCE: f64 = 1e-12;
/// Default cap on `V^horizon` for [`lossless_oracle`].
pub const DEFAULT_ENUMERATION_CAP: u64 = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("target and draft distributions are identical; residual is undefined")]
    NoResidual,
    #[error("token {token} outside vocabulary of size {vocab}")]
    VocabMismatch { token: u32, vocab: usize },
    #[error("vocabulary sizes differ: {left} vs {right}")]
    VocabSizeMismatch { left: usize, right: usize },
    #[error("invalid draft block: {0}")]
    InvalidBlock(String),
    #[error("enumeration of {states} sequences exceeds cap {cap}")]
    TooLarge { states: u64, cap: u64 },
}

/// Index into a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

/// Checks every token against a vocabulary size.
pub fn check_tokens(tokens: &[TokenId], vocab: usize) -> Result<(), SpecError> {
    match tokens.iter().find(|t| t.index() >= vocab) {
        Some(t) => Err(SpecError::VocabMismatch { token: t.0, vocab }),
        None => Ok(()),
    }
}

/// A probability distribution over a finite vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    /// Validates and, when the sum is within [`RENORMALIZE_WINDOW`] of one,
    /// renormalizes.
    pub fn new(probs: Vec<f64>) -> Result<Self, SpecError> {
        if probs.is_empty() {
            return Err(SpecError::InvalidDistribution("empty vector".into()));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(SpecError::InvalidDistribution(format!("entry {i} is {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > RENORMALIZE_WINDOW {
            return Err(SpecError::InvalidDistribution(format!(
                "entries sum to {sum}"
            )));
        }
        let probs = if sum == 1.0 {
            probs
        } else {
            probs.into_iter().map(|p| p / sum).collect()
        };
        Ok(Self { probs })
    }

    /// Point mass on `token`.
    pub fn one_hot(vocab: usize, token: TokenId) -> Result<Self, SpecError> {
        check_tokens(&[token], vocab)?;
        let mut probs = vec![0.0; vocab];
        probs[token.index()] = 1.0;
        Ok(Self { probs })
    }

    pub fn uniform(vocab: usize) -> Result<Self, SpecError> {
        if vocab == 0 {
            return Err(SpecError::InvalidDistribution("empty vocabulary".into()));
        }
        Ok(Self {
            probs: vec![1.0 / vocab as f64; vocab],
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of `token`; zero for ids outside the vocabulary.
    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs.get(token.index()).copied().unwrap_or(0.0)
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// Inverse-CDF draw over ascending token ids using one uniform `u`.
    pub fn sample_with(&self, u: f64) -> TokenId {
        let mut cum = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return TokenId(i as u32);
            }
        }
        // Rounding left u above the final cumulative sum: take the last
        // token with positive mass.
        let last = self
            .probs
            .iter()
            .rposition(|p| *p > 0.0)
            .expect("a valid distribution has positive mass");
        TokenId(last as u32)
    }

    /// Total variation distance, half the L1 distance.
    pub fn total_variation(&self, other: &ProbVector) -> Result<f64, SpecError> {
        same_vocab(self, other)?;
        Ok(0.5
            * self
                .probs
                .iter()
                .zip(&other.probs)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }
}

fn same_vocab(a: &ProbVector, b: &ProbVector) -> Result<(), SpecError> {
    if a.len() != b.len() {
        return Err(SpecError::VocabSizeMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// An ordered run of drafted tokens and their draft probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftBlock {
    tokens: Vec<TokenId>,
    draft_probs: Vec<f64>,
}

impl DraftBlock {
    pub fn new(tokens: Vec<TokenId>, draft_probs: Vec<f64>) -> Result<Self, SpecError> {
        if tokens.is_empty() {
            return Err(SpecError::InvalidBlock("empty block".into()));
        }
        if tokens.len() != draft_probs.len() {
            return Err(SpecError::InvalidBlock(format!(
                "{} tokens but {} probabilities",
                tokens.len(),
                draft_probs.len()
            )));
        }
        if let Some(p) = draft_probs
            .iter()
            .find(|p| !p.is_finite() || **p <= 0.0 || **p > 1.0)
        {
            return Err(SpecError::InvalidBlock(format!(
                "draft probability {p} outside (0, 1]"
            )));
        }
        Ok(Self {
            tokens,
            draft_probs,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn draft_probs(&self) -> &[f64] {
        &self.draft_probs
    }
}

/// Result of verifying one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub accepted_count: usize,
    pub corrective_token: Option<TokenId>,
}

impl VerifyOutcome {
    /// Tokens this outcome commits: the accepted prefix plus any corrective.
    pub fn committed(&self, block: &DraftBlock) -> Vec<TokenId> {
        let mut out = block.tokens()[..self.accepted_count].to_vec();
        out.extend(self.corrective_token);
        out
    }
}

/// `min(1, p_target / p_draft)`.
pub fn accept_probability(p_target_tok: f64, p_draft_tok: f64) -> Result<f64, SpecError> {
    if !(0.0..=1.0).contains(&p_target_tok) {
        return Err(SpecError::Domain(format!(
            "target probability {p_target_tok} outside [0, 1]"
        )));
    }
    if !(p_draft_tok > 0.0 && p_draft_tok <= 1.0) {
        return Err(SpecError::Domain(format!(
            "draft probability {p_draft_tok} outside (0, 1]"
        )));
    }
    Ok((p_target_tok / p_draft_tok).min(1.0))
}

/// Normalized positive part of `p_target - p_draft`.
pub fn residual_distribution(
    p_target: &ProbVector,
    p_draft: &ProbVector,
) -> Result<ProbVector, SpecError> {
    same_vocab(p_target, p_draft)?;
    let identical = p_target
        .probs
        .iter()
        .zip(&p_draft.probs)
        .all(|(t, d)| (t - d).abs() <= IDENTICAL_TOLERANCE);
    if identical {
        return Err(SpecError::NoResidual);
    }
    let positive: Vec<f64> = p_target
        .probs
        .iter()
        .zip(&p_draft.probs)
        .map(|(t, d)| (t - d).max(0.0))
        .collect();
    let mass: f64 = positive.iter().sum();
    if mass <= 0.0 {
        return Err(SpecError::NoResidual);
    }
    Ok(ProbVector {
        probs: positive.into_iter().map(|p| p / mass).collect(),
    })
}

/// `sum_x min(p_target[x], p_draft[x])`, the per-position acceptance rate.
pub fn expected_acceptance_rate(
    p_target: &ProbVector,
    p_draft: &ProbVector,
) -> Result<f64, SpecError> {
    same_vocab(p_target, p_draft)?;
    Ok(p_target
        .probs
        .iter()
        .zip(&p_draft.probs)
        .map(|(t, d)| t.min(*d))
        .sum::<f64>()
        .min(1.0))
}

/// Verifies a drafted block against the target model.
///
/// Draw order is fixed: one uniform per examined position, then one uniform
/// for the corrective draw on the first rejection. `draft` supplies the full
/// draft distribution needed for the residual; acceptance itself uses the
/// probabilities carried in the block. If the two disagree so badly that the
/// residual is undefined, the corrective token is drawn from the target.
pub fn verify_block(
    block: &DraftBlock,
    target: &dyn LanguageModel,
    draft: &dyn LanguageModel,
    context: &[TokenId],
    rng: &mut dyn UniformSource,
) -> Result<VerifyOutcome, SpecError> {
    let vocab = target.vocab_size();
    check_tokens(block.tokens(), vocab)?;
    check_tokens(context, vocab)?;
    if draft.vocab_size() != vocab {
        return Err(SpecError::VocabSizeMismatch {
            left: vocab,
            right: draft.vocab_size(),
        });
    }

    let mut ctx = Vec::with_capacity(context.len() + block.len());
    ctx.extend_from_slice(context);
    for (i, (&tok, &q)) in block.tokens().iter().zip(block.draft_probs()).enumerate() {
        let p_target = target.next_distribution(&ctx)?;
        let alpha = accept_probability(p_target.prob(tok), q)?;
        rng.at_position(i);
        let u = rng.next_uniform();
        if u < alpha {
            ctx.push(tok);
            continue;
        }
        let p_draft = draft.next_distribution(&ctx)?;
        let residual = match residual_distribution(&p_target, &p_draft) {
            Ok(r) => r,
            Err(SpecError::NoResidual) => p_target,
            Err(e) => return Err(e),
        };
        let corrective = residual.sample_with(rng.next_uniform());
        return Ok(VerifyOutcome {
            accepted_count: i,
            corrective_token: Some(corrective),
        });
    }
    Ok(VerifyOutcome {
        accepted_count: block.len(),
        corrective_token: None,
    })
}

/// Exact distribution of the first `horizon` committed tokens produced by
/// repeated draft-then-verify rounds with speculative length `gamma`.
///
/// Every acceptance and rejection path is enumerated; probability mass is
/// merged per `(committed sequence, position in block)` state, so the work
/// is bounded by the number of distinct sequences rather than paths. Keys
/// of the returned map are the generated tokens only, without the prompt.
pub fn lossless_oracle(
    draft: &dyn LanguageModel,
    target: &dyn LanguageModel,
    prompt: &[TokenId],
    horizon: usize,
    gamma: usize,
    cap: u64,
) -> Result<BTreeMap<Vec<TokenId>, f64>, SpecError> {
    let vocab = target.vocab_size();
    if draft.vocab_size() != vocab {
        return Err(SpecError::VocabSizeMismatch {
            left: vocab,
            right: draft.vocab_size(),
        });
    }
    if gamma == 0 {
        return Err(SpecError::Domain("speculative length must be >= 1".into()));
    }
    check_tokens(prompt, vocab)?;
    let states = (vocab as u64)
        .checked_pow(horizon as u32)
        .unwrap_or(u64::MAX);
    if states > cap {
        return Err(SpecError::TooLarge { states, cap });
    }

    // State: generated tokens so far and how many tokens of the current
    // block have already been accepted (0 means a fresh block starts).
    let mut frontier: BTreeMap<(Vec<TokenId>, usize), f64> = BTreeMap::new();
    frontier.insert((Vec::new(), 0), 1.0);
    for _ in 0..horizon {
        let mut next: BTreeMap<(Vec<TokenId>, usize), f64> = BTreeMap::new();
        for ((generated, in_block), mass) in frontier {
            let remaining = horizon - generated.len();
            // Block length is fixed when the block starts.
            let block_len = gamma.min(remaining + in_block);
            let mut ctx = prompt.to_vec();
            ctx.extend_from_slice(&generated);
            let p_target = target.next_distribution(&ctx)?;
            let p_draft = draft.next_distribution(&ctx)?;
            let residual = match residual_distribution(&p_target, &p_draft) {
                Ok(r) => Some(r),
                Err(SpecError::NoResidual) => None,
                Err(e) => return Err(e),
            };
            for (x, &q) in p_draft.as_slice().iter().enumerate() {
                if q <= 0.0 {
                    continue;
                }
                let tok = TokenId(x as u32);
                let alpha = accept_probability(p_target.prob(tok), q)?;
                if alpha > 0.0 {
                    let mut seq = generated.clone();
                    seq.push(tok);
                    let pos = if in_block + 1 == block_len {
                        0
                    } else {
                        in_block + 1
                    };
                    *next.entry((seq, pos)).or_insert(0.0) += mass * q * alpha;
                }
                let reject = mass * q * (1.0 - alpha);
                if reject > 0.0 {
                    let residual = residual
                        .as_ref()
                        .expect("rejection has positive mass only when distributions differ");
                    for (y, &r) in residual.as_slice().iter().enumerate() {
                        if r > 0.0 {
                            let mut seq = generated.clone();
                            seq.push(TokenId(y as u32));
                            *next.entry((seq, 0)).or_insert(0.0) += reject * r;
                        }
                    }
                }
            }
        }
        frontier = next;
    }
    let mut out = BTreeMap::new();
    for ((seq, _), mass) in frontier {
        *out.entry(seq).or_insert(0.0) += mass;
    }
    Ok(out)
}

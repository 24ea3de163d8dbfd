use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, ModelError, ModelProfile, Tokenizer, TokenizerId};
use crate::rng::{mix64, unit_f64};
use crate::specdec::{check_tokens, ProbVector, SpecError, TokenId};

/// Parameters of a [`SeededCategoricalModel`].
///
/// The base distribution is `softmax(concentration * g_base)` where `g_base`
/// holds Gumbel variates hashed from the last `context_window` tokens.
/// Models sharing `seed` share it. With `noise_scale > 0` the model mixes in
/// an unrelated distribution `softmax(g_noise)` with a per-context weight
/// drawn uniformly from `[0, 2 * noise_scale]` (clamped to 1), so a draft
/// model is a target with a tunable, context-dependent quality gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeededConfig {
    pub vocab_size: usize,
    pub seed: u64,
    pub noise_seed: u64,
    pub noise_scale: f64,
    pub concentration: f64,
    pub eos_token: TokenId,
    pub eos_floor: f64,
    pub context_window: usize,
}

impl Default for SeededConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            seed: 0,
            noise_seed: 0,
            noise_scale: 0.0,
            concentration: 1.0,
            eos_token: TokenId(0),
            eos_floor: 0.002,
            context_window: 1,
        }
    }
}

/// Desk-scale stand-in for a neural language model.
#[derive(Debug, Clone)]
pub struct SeededCategoricalModel {
    cfg: SeededConfig,
    profile: ModelProfile,
    tokenizer: TokenizerId,
    // Short windows have few distinct contexts; their distributions are
    // precomputed.
    table: Option<Arc<Vec<ProbVector>>>,
}

const TABLE_MAX_ENTRIES: usize = 1 << 22;

impl SeededCategoricalModel {
    pub fn new(cfg: SeededConfig, profile: ModelProfile) -> Result<Self, ModelError> {
        let tokenizer = Tokenizer::synthetic(cfg.vocab_size);
        Self::with_tokenizer(cfg, profile, &tokenizer)
    }

    pub fn with_tokenizer(
        cfg: SeededConfig,
        profile: ModelProfile,
        tokenizer: &Tokenizer,
    ) -> Result<Self, ModelError> {
        if cfg.vocab_size < 2 {
            return Err(ModelError::InvalidParameter(
                "vocab_size must be >= 2".into(),
            ));
        }
        if tokenizer.vocab_size() != cfg.vocab_size {
            return Err(ModelError::InvalidParameter(format!(
                "vocab_size {} but tokenizer has {} tokens",
                cfg.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        if !(cfg.concentration > 0.0 && cfg.concentration.is_finite()) {
            return Err(ModelError::InvalidParameter(
                "concentration must be > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&cfg.noise_scale) {
            return Err(ModelError::InvalidParameter(
                "noise_scale must be in [0, 1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&cfg.eos_floor) {
            return Err(ModelError::InvalidParameter(
                "eos_floor must be in [0, 1)".into(),
            ));
        }
        check_tokens(&[cfg.eos_token], cfg.vocab_size)?;
        let mut model = Self {
            cfg,
            profile,
            tokenizer: tokenizer.id().clone(),
            table: None,
        };
        let v = model.cfg.vocab_size;
        let rows = match model.cfg.context_window {
            0 | 1 => Some(v + 1),
            2 => v.checked_mul(v).map(|vv| vv + v + 1),
            _ => None,
        };
        if rows.is_some_and(|r| r.saturating_mul(v) <= TABLE_MAX_ENTRIES) {
            let mut table = Vec::with_capacity(rows.unwrap_or(0));
            table.push(model.compute(&[])?);
            if model.cfg.context_window >= 1 {
                for t in 0..v {
                    table.push(model.compute(&[TokenId(t as u32)])?);
                }
            }
            if model.cfg.context_window == 2 {
                for a in 0..v {
                    for b in 0..v {
                        table.push(model.compute(&[TokenId(a as u32), TokenId(b as u32)])?);
                    }
                }
            }
            model.table = Some(Arc::new(table));
        }
        Ok(model)
    }

    pub fn with_profile(mut self, profile: ModelProfile) -> Self {
        self.profile = profile;
        self
    }

    pub fn config(&self) -> &SeededConfig {
        &self.cfg
    }

    fn context_key(&self, context: &[TokenId]) -> u64 {
        let w = self.cfg.context_window;
        let mut h = mix64(w as u64 ^ 0x5EED);
        for i in 0..w {
            // Missing history is padded with a sentinel.
            let tok = if context.len() + i >= w {
                context[context.len() + i - w].0 as u64
            } else {
                u64::from(u32::MAX) + 1
            };
            h = mix64(h ^ tok);
        }
        h
    }
}

fn gumbel(seed: u64, key: u64, i: usize) -> f64 {
    let bits = mix64(mix64(seed ^ 0xA076_1D64_78BD_642F) ^ mix64(key ^ i as u64));
    // Strictly inside (0, 1).
    let u = unit_f64(bits) + 0.5 / (1u64 << 53) as f64;
    -libm::log(-libm::log(u))
}

impl LanguageModel for SeededCategoricalModel {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<ProbVector, SpecError> {
        check_tokens(context, self.cfg.vocab_size)?;
        if let Some(table) = &self.table {
            let v = self.cfg.vocab_size;
            let row = match (self.cfg.context_window, context) {
                (0, _) | (_, []) => 0,
                (1, [.., t]) | (_, [t]) => t.index() + 1,
                (_, [.., a, b]) => 1 + v + a.index() * v + b.index(),
            };
            return Ok(table[row].clone());
        }
        self.compute(context)
    }

    fn profile(&self) -> &ModelProfile {
        &self.profile
    }

    fn tokenizer_id(&self) -> &TokenizerId {
        &self.tokenizer
    }
}

impl SeededCategoricalModel {
    fn compute(&self, context: &[TokenId]) -> Result<ProbVector, SpecError> {
        let key = self.context_key(context);
        let c = &self.cfg;
        let mut mixed =
            softmax((0..c.vocab_size).map(|i| c.concentration * gumbel(c.seed, key, i)));
        if c.noise_scale > 0.0 {
            let noise_seed = c.noise_seed ^ 0x006E_6F69_7365;
            let weight = (2.0 * c.noise_scale * unit_f64(mix64(noise_seed ^ mix64(key)))).min(1.0);
            let noise = softmax((0..c.vocab_size).map(|i| gumbel(noise_seed, key, i)));
            for (m, n) in mixed.iter_mut().zip(noise) {
                *m = (1.0 - weight) * *m + weight * n;
            }
        }
        let eos = c.eos_token.index();
        let probs = mixed
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let p = (1.0 - c.eos_floor) * w;
                if i == eos {
                    p + c.eos_floor
                } else {
                    p
                }
            })
            .collect();
        ProbVector::new(probs)
    }
}

fn softmax(logits: impl Iterator<Item = f64>) -> Vec<f64> {
    let logits: Vec<f64> = logits.collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|l| libm::exp(l - max)).collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    w
}

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::device::DraftVerdict;
use crate::models::LanguageModel;
use crate::specdec::{ProbVector, TokenId};

/// How a committed token was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    /// Accepted draft or corrective token from the verification server.
    Verified,
    /// Draft token released unverified by the reliability policy.
    Fallback,
    /// Token generated by the server alone.
    Generated,
    /// Token drafted on a device with no server.
    Draft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub time_ms: f64,
    pub device: usize,
    pub tokens: u32,
    pub kind: TokenKind,
}

/// Every commit of a run, in event order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommitTrace {
    pub horizon_ms: f64,
    pub records: Vec<CommitRecord>,
}

/// Fraction of the run excluded as warm-up.
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.10;

impl CommitTrace {
    pub fn new(horizon_ms: f64) -> Self {
        Self {
            horizon_ms,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, time_ms: f64, device: usize, tokens: usize, kind: TokenKind) {
        if tokens > 0 {
            self.records.push(CommitRecord {
                time_ms,
                device,
                tokens: tokens as u32,
                kind,
            });
        }
    }

    /// `[start, end)` of the measurement window.
    pub fn window_ms(&self, warmup_fraction: f64) -> (f64, f64) {
        (self.horizon_ms * warmup_fraction, self.horizon_ms)
    }

    /// Tokens of the given kinds committed inside the window.
    pub fn count(&self, kinds: &[TokenKind], warmup_fraction: f64) -> u64 {
        let (start, end) = self.window_ms(warmup_fraction);
        self.records
            .iter()
            .filter(|r| r.time_ms >= start && r.time_ms < end && kinds.contains(&r.kind))
            .map(|r| u64::from(r.tokens))
            .sum()
    }

    /// Per-device token rates over the window, indexed by device.
    pub fn per_device_rates(
        &self,
        devices: usize,
        kinds: &[TokenKind],
        warmup_fraction: f64,
    ) -> Vec<f64> {
        let (start, end) = self.window_ms(warmup_fraction);
        let secs = (end - start) / 1000.0;
        let mut counts = vec![0u64; devices];
        for r in &self.records {
            if r.time_ms >= start
                && r.time_ms < end
                && kinds.contains(&r.kind)
                && r.device < devices
            {
                counts[r.device] += u64::from(r.tokens);
            }
        }
        counts.into_iter().map(|c| c as f64 / secs).collect()
    }
}

/// Tokens of `kinds` committed system-wide per second, warm-up excluded.
pub fn measure_wstgr(
    trace: &CommitTrace,
    kinds: &[TokenKind],
    warmup_fraction: f64,
) -> Result<f64, ExperimentError> {
    let (start, end) = trace.window_ms(warmup_fraction);
    if trace.records.is_empty() || end <= start {
        return Err(ExperimentError::EmptyTrace);
    }
    Ok(trace.count(kinds, warmup_fraction) as f64 / ((end - start) / 1000.0))
}

pub const HISTOGRAM_BINS: usize = 10;
/// Bins with fewer samples are flagged as unreliable.
pub const MIN_BIN_SAMPLES: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub samples: u64,
    pub accepted: u64,
    pub acceptance_rate: Option<f64>,
    pub low_confidence_estimate: bool,
}

impl HistogramBin {
    pub fn midpoint(&self) -> f64 {
        (self.lo + self.hi) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistogram {
    pub bins: Vec<HistogramBin>,
    pub samples: u64,
}

impl ConfidenceHistogram {
    /// Spearman correlation of acceptance rate against bin midpoint over
    /// the bins with enough samples.
    pub fn spearman(&self) -> Option<f64> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = self
            .bins
            .iter()
            .filter(|b| !b.low_confidence_estimate)
            .filter_map(|b| b.acceptance_rate.map(|r| (b.midpoint(), r)))
            .unzip();
        spearman(&xs, &ys)
    }

    pub fn acceptance_rate(&self) -> Option<f64> {
        let acc: u64 = self.bins.iter().map(|b| b.accepted).sum();
        (self.samples > 0).then(|| acc as f64 / self.samples as f64)
    }
}

/// Ten equal-width confidence bins on `[0, 1]`; a confidence of exactly 1
/// falls in the last bin.
pub fn confidence_acceptance_histogram(
    verdicts: &[DraftVerdict],
) -> Result<ConfidenceHistogram, ExperimentError> {
    if verdicts.is_empty() {
        return Err(ExperimentError::EmptyTrace);
    }
    let mut samples = [0u64; HISTOGRAM_BINS];
    let mut accepted = [0u64; HISTOGRAM_BINS];
    for v in verdicts {
        let c = v.confidence.clamp(0.0, 1.0);
        let i = ((c * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        samples[i] += 1;
        accepted[i] += u64::from(v.accepted);
    }
    let bins = (0..HISTOGRAM_BINS)
        .map(|i| HistogramBin {
            lo: i as f64 / HISTOGRAM_BINS as f64,
            hi: (i + 1) as f64 / HISTOGRAM_BINS as f64,
            samples: samples[i],
            accepted: accepted[i],
            acceptance_rate: (samples[i] > 0).then(|| accepted[i] as f64 / samples[i] as f64),
            low_confidence_estimate: samples[i] < MIN_BIN_SAMPLES,
        })
        .collect();
    Ok(ConfidenceHistogram {
        bins,
        samples: verdicts.len() as u64,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation of the ranks. `None` with fewer than two points or
/// when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Next-token counts keyed by the preceding `window` tokens.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextCounts {
    window: usize,
    counts: BTreeMap<Vec<TokenId>, Vec<u64>>,
    total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvEstimate {
    /// Count-weighted total variation between the empirical conditionals
    /// and the reference model.
    pub tv: f64,
    /// Expected value of `tv` from sampling noise alone, if the tokens
    /// really came from the reference model.
    pub noise_floor: f64,
    pub samples: u64,
    pub contexts: usize,
}

impl ContextCounts {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            ..Default::default()
        }
    }

    pub fn samples(&self) -> u64 {
        self.total
    }

    /// Adds every generated token of `full`, whose first `prompt_len`
    /// tokens are the prompt.
    pub fn add_sequence(&mut self, full: &[TokenId], prompt_len: usize, vocab: usize) {
        for i in prompt_len.max(1)..full.len() {
            let lo = i.saturating_sub(self.window);
            let row = self
                .counts
                .entry(full[lo..i].to_vec())
                .or_insert_with(|| vec![0; vocab]);
            if let Some(c) = row.get_mut(full[i].index()) {
                *c += 1;
                self.total += 1;
            }
        }
    }

    /// Compares the empirical conditionals with `model`'s.
    pub fn tv_against(&self, model: &dyn LanguageModel) -> Result<TvEstimate, ExperimentError> {
        if self.total == 0 {
            return Err(ExperimentError::EmptyTrace);
        }
        let mut tv = 0.0;
        let mut floor = 0.0;
        for (ctx, row) in &self.counts {
            let n: u64 = row.iter().sum();
            if n == 0 {
                continue;
            }
            let p = model.next_distribution(ctx)?;
            let emp = empirical(row, n);
            tv += n as f64 * emp.total_variation(&p)?;
            floor += n as f64 * noise_floor(&p, n);
        }
        let total = self.total as f64;
        Ok(TvEstimate {
            tv: tv / total,
            noise_floor: floor / total,
            samples: self.total,
            contexts: self.counts.len(),
        })
    }

    /// Count-weighted TV between two models over the observed contexts.
    pub fn model_tv(
        &self,
        a: &dyn LanguageModel,
        b: &dyn LanguageModel,
    ) -> Result<f64, ExperimentError> {
        if self.total == 0 {
            return Err(ExperimentError::EmptyTrace);
        }
        let mut tv = 0.0;
        for (ctx, row) in &self.counts {
            let n: u64 = row.iter().sum();
            tv += n as f64
                * a.next_distribution(ctx)?
                    .total_variation(&b.next_distribution(ctx)?)?;
        }
        Ok(tv / self.total as f64)
    }
}

fn empirical(row: &[u64], n: u64) -> ProbVector {
    let probs: Vec<f64> = row.iter().map(|&c| c as f64 / n as f64).collect();
    ProbVector::new(probs).expect("counts normalize")
}

/// Normal approximation of the expected TV between `p` and an empirical
/// distribution of `n` draws from it: `1/2 sum sqrt(2 p (1 - p) / (pi n))`.
pub fn noise_floor(p: &ProbVector, n: u64) -> f64 {
    let n = n as f64;
    0.5 * p
        .as_slice()
        .iter()
        .map(|&q| (2.0 * q * (1.0 - q) / (PI * n)).sqrt())
        .sum::<f64>()
}

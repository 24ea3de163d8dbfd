//! Declarative experiment configuration.
//!
//! Every section and field has a default, so an empty document is a valid
//! configuration. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::calibration::{hardware, DraftNoise, HardwareProfile};
use super::cost::CostParams;
use super::workload::ArrivalMode;
use super::world::{DeviceSpec, Scenario, WorldSpec};
use super::ExperimentError;
use crate::device::{DraftingPolicy, ReliabilityPolicy, DEFAULT_MAX_OUTSTANDING};
use crate::models::{
    LanguageModel, ModelProfile, QuantBits, SeededCategoricalModel, SeededConfig, Tokenizer,
};
use crate::netsim::NetworkConditions;
use crate::rng::derive_seed;
use crate::server::{ServerConfig, ServiceTimeModel, DEFAULT_BATCH_TIMEOUT_MS};
use crate::specdec::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seeds: SeedsConfig,
    pub models: ModelsConfig,
    pub server: ServerSection,
    pub devices: Vec<DeviceGroup>,
    pub network: NetworkConditions,
    pub workload: WorkloadSection,
    pub experiment: ExperimentSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seeds: SeedsConfig::default(),
            models: ModelsConfig::default(),
            server: ServerSection::default(),
            devices: vec![DeviceGroup::default()],
            network: NetworkConditions::default(),
            workload: WorkloadSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsConfig {
    pub root: u64,
}

impl Default for SeedsConfig {
    fn default() -> Self {
        Self { root: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub vocab_size: usize,
    /// One token per line; overrides `vocab_size`.
    pub vocab_file: Option<PathBuf>,
    pub concentration: f64,
    pub context_window: usize,
    pub eos_token: u32,
    pub eos_floor: f64,
    pub draft_noise: DraftNoise,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            vocab_file: None,
            concentration: 2.0,
            context_window: 2,
            eos_token: 0,
            eos_floor: 0.002,
            draft_noise: DraftNoise::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub hardware: String,
    pub batch_size: usize,
    pub batch_timeout_ms: f64,
    pub service: ServiceTimeModel,
    pub record_metrics: bool,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            hardware: "a100-server".into(),
            batch_size: 8,
            batch_timeout_ms: DEFAULT_BATCH_TIMEOUT_MS,
            service: ServiceTimeModel::default(),
            record_metrics: true,
        }
    }
}

/// Fields left unset take the RTT-derived defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReliabilityOverrides {
    pub timeout_ms: Option<f64>,
    pub max_retries: Option<u32>,
    pub failure_threshold: Option<u32>,
    pub fallback_enabled: Option<bool>,
}

impl ReliabilityOverrides {
    pub fn resolve(&self, rtt_mean_ms: f64) -> ReliabilityPolicy {
        let mut p = ReliabilityPolicy::for_rtt(rtt_mean_ms);
        if let Some(v) = self.timeout_ms {
            p.timeout_ms = v;
        }
        if let Some(v) = self.max_retries {
            p.max_retries = v;
        }
        if let Some(v) = self.failure_threshold {
            p.failure_threshold = v;
        }
        if let Some(v) = self.fallback_enabled {
            p.fallback_enabled = v;
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceGroup {
    pub hardware: String,
    pub quant: QuantBits,
    pub count: usize,
    /// Overrides the hardware profile's rate.
    pub tokens_per_second: Option<f64>,
    pub drafting: DraftingPolicy,
    pub reliability: ReliabilityOverrides,
    pub max_tokens: usize,
    pub max_outstanding: usize,
}

impl Default for DeviceGroup {
    fn default() -> Self {
        Self {
            hardware: "jetson-orin-nano".into(),
            quant: QuantBits::Q4,
            count: 16,
            tokens_per_second: None,
            drafting: DraftingPolicy::default(),
            reliability: ReliabilityOverrides::default(),
            max_tokens: 256,
            max_outstanding: DEFAULT_MAX_OUTSTANDING,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub arrival: ArrivalMode,
    pub horizon_s: f64,
    pub warmup_fraction: f64,
    pub prompt_len: usize,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self {
            arrival: ArrivalMode::OpenLoop,
            horizon_s: 60.0,
            warmup_fraction: super::metrics::DEFAULT_WARMUP_FRACTION,
            prompt_len: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub scenario: Scenario,
    /// Per-device token rate a supported device must sustain.
    pub target_rate: f64,
    pub n_max: usize,
    /// Run a capacity search as part of `simulate`.
    pub capacity: bool,
    pub loss_rates: Vec<f64>,
    pub gamma_values: Vec<usize>,
    pub batch_values: Vec<usize>,
    pub device_values: Vec<usize>,
    pub quant_values: Vec<QuantBits>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            scenario: Scenario::Sled,
            target_rate: 10.0,
            n_max: 64,
            capacity: false,
            loss_rates: vec![0.0, 0.01, 0.05, 0.1, 0.5, 1.0],
            gamma_values: vec![1, 2, 4, 8],
            batch_values: vec![1, 2, 4, 8, 16, 32],
            device_values: vec![1, 2, 4, 8, 16, 32],
            quant_values: QuantBits::ALL.to_vec(),
        }
    }
}

/// Target and draft models built from a [`ModelsConfig`].
#[derive(Clone)]
pub struct ModelSet {
    pub tokenizer: Tokenizer,
    pub target: Arc<SeededCategoricalModel>,
    pub drafts: BTreeMap<QuantBits, Arc<SeededCategoricalModel>>,
    pub eos: Option<TokenId>,
}

impl ModelSet {
    pub fn draft(&self, quant: QuantBits) -> Arc<SeededCategoricalModel> {
        self.drafts[&quant].clone()
    }
}

pub fn draft_model_name(quant: QuantBits) -> String {
    format!("draft-q{}", quant.bits())
}

/// A device after expanding groups into individual units.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceUnit {
    pub hardware: HardwareProfile,
    pub group: DeviceGroup,
}

impl DeviceUnit {
    pub fn tokens_per_second(&self) -> f64 {
        self.group
            .tokens_per_second
            .unwrap_or_else(|| self.hardware.rate(self.group.quant))
    }

    pub fn hourly_usd(&self) -> f64 {
        CostParams::new(1.0, self.hardware.price_usd, self.hardware.watts_avg).hourly_usd()
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.devices.is_empty() || self.devices.iter().all(|d| d.count == 0) {
            return bad("at least one device is required".into());
        }
        for d in &self.devices {
            if hardware(&d.hardware).is_none() {
                return bad(format!("unknown hardware profile {:?}", d.hardware));
            }
            if let Some(r) = d.tokens_per_second {
                if !(r > 0.0 && r.is_finite()) {
                    return bad("tokens_per_second must be > 0".into());
                }
            }
            d.drafting.validate()?;
            d.reliability.resolve(self.network.rtt_mean_ms).validate()?;
            if d.max_outstanding == 0 {
                return bad("max_outstanding must be >= 1".into());
            }
        }
        if hardware(&self.server.hardware).is_none() {
            return bad(format!(
                "unknown hardware profile {:?}",
                self.server.hardware
            ));
        }
        if self.server.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.server.batch_timeout_ms >= 0.0 && self.server.batch_timeout_ms.is_finite()) {
            return bad("batch_timeout_ms must be >= 0".into());
        }
        self.server.service.validate()?;
        self.network.validate()?;
        let w = &self.workload;
        if !(w.horizon_s > 0.0 && w.horizon_s.is_finite()) {
            return bad("horizon_s must be > 0".into());
        }
        if !(0.0..1.0).contains(&w.warmup_fraction) {
            return bad("warmup_fraction must be in [0, 1)".into());
        }
        let e = &self.experiment;
        if !(e.target_rate > 0.0 && e.target_rate.is_finite()) {
            return bad("target_rate must be > 0".into());
        }
        if e.n_max == 0 {
            return bad("n_max must be >= 1".into());
        }
        if e.loss_rates.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return bad("loss rates must be in [0, 1]".into());
        }
        if e.gamma_values.contains(&0)
            || e.batch_values.contains(&0)
            || e.device_values.contains(&0)
        {
            return bad("sweep values must be >= 1".into());
        }
        Ok(())
    }

    pub fn build_models(&self) -> Result<ModelSet, ExperimentError> {
        let m = &self.models;
        let tokenizer = match &m.vocab_file {
            Some(path) => Tokenizer::load(path)?,
            None => Tokenizer::synthetic(m.vocab_size),
        };
        let vocab = tokenizer.vocab_size();
        let root = self.seeds.root;
        let base = SeededConfig {
            vocab_size: vocab,
            seed: derive_seed(root, "target-model", 0),
            noise_seed: derive_seed(root, "draft-noise", 0),
            noise_scale: 0.0,
            concentration: m.concentration,
            eos_token: TokenId(m.eos_token),
            eos_floor: m.eos_floor,
            context_window: m.context_window,
        };
        let server_hw = hardware(&self.server.hardware).ok_or_else(|| {
            ExperimentError::Config(format!("unknown hardware {:?}", self.server.hardware))
        })?;
        let target_profile = ModelProfile::new(
            "target",
            server_hw.rate(QuantBits::Q16),
            server_hw.watts_avg,
            QuantBits::Q16,
        )?;
        let target = Arc::new(SeededCategoricalModel::with_tokenizer(
            base.clone(),
            target_profile,
            &tokenizer,
        )?);
        let mut drafts = BTreeMap::new();
        for q in QuantBits::ALL {
            let unit = self.units().into_iter().find(|u| u.group.quant == q);
            let (rate, watts) = match &unit {
                Some(u) => (u.tokens_per_second(), u.hardware.watts_avg),
                None => (
                    super::calibration::RPI5.rate(q),
                    super::calibration::RPI5.watts_avg,
                ),
            };
            let cfg = SeededConfig {
                noise_scale: m.draft_noise.get(q),
                ..base.clone()
            };
            let profile = ModelProfile::new(draft_model_name(q), rate, watts, q)?;
            drafts.insert(
                q,
                Arc::new(SeededCategoricalModel::with_tokenizer(
                    cfg, profile, &tokenizer,
                )?),
            );
        }
        Ok(ModelSet {
            eos: (m.eos_floor > 0.0).then_some(TokenId(m.eos_token)),
            tokenizer,
            target,
            drafts,
        })
    }

    /// The configured fleet, one entry per device.
    pub fn units(&self) -> Vec<DeviceUnit> {
        self.devices
            .iter()
            .flat_map(|g| {
                let hw = hardware(&g.hardware).unwrap_or(super::calibration::RPI5);
                std::iter::repeat_n(
                    DeviceUnit {
                        hardware: hw,
                        group: g.clone(),
                    },
                    g.count,
                )
            })
            .collect()
    }

    /// The fleet resized to `n` devices by cycling through the configured
    /// units.
    pub fn units_n(&self, n: usize) -> Vec<DeviceUnit> {
        let base = self.units();
        if base.is_empty() {
            return base;
        }
        base.iter().cycle().take(n).cloned().collect()
    }

    pub fn num_devices(&self) -> usize {
        self.devices.iter().map(|g| g.count).sum()
    }

    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            batch_size: self.server.batch_size,
            batch_timeout_ms: self.server.batch_timeout_ms,
            service: self.server.service,
            seed: derive_seed(self.seeds.root, "server", 0),
            record_metrics: self.server.record_metrics,
        }
    }

    pub fn server_hourly_usd(&self) -> f64 {
        let hw = hardware(&self.server.hardware).unwrap_or(super::calibration::A100_SERVER);
        CostParams::new(1.0, hw.price_usd, hw.watts_avg).hourly_usd()
    }

    pub fn world_spec(
        &self,
        models: &ModelSet,
        scenario: Scenario,
        devices: Option<usize>,
    ) -> WorldSpec {
        let units = match devices {
            Some(n) => self.units_n(n),
            None => self.units(),
        };
        let devices = units
            .iter()
            .map(|u| DeviceSpec {
                draft: models.draft(u.group.quant) as Arc<dyn LanguageModel>,
                tokens_per_second: u.tokens_per_second(),
                drafting: u.group.drafting,
                reliability: u.group.reliability.resolve(self.network.rtt_mean_ms),
                max_tokens: u.group.max_tokens,
                max_outstanding: u.group.max_outstanding,
            })
            .collect();
        WorldSpec {
            scenario,
            arrival: self.workload.arrival,
            devices,
            target: models.target.clone(),
            server: self.server_config(),
            network: self.network,
            horizon_ms: self.workload.horizon_s * 1000.0,
            prompt_len: self.workload.prompt_len,
            eos: models.eos,
            seed: self.seeds.root,
            collect_verdicts: scenario == Scenario::Sled,
            collect_counts: false,
            quality_window: self.models.context_window,
        }
    }

    /// Configuration used for the packet-loss sweep: four Raspberry Pi 5
    /// devices with 16-bit drafts running closed-loop sessions.
    pub fn loss_sweep_default() -> Self {
        Config {
            devices: vec![DeviceGroup {
                hardware: "rpi5".into(),
                quant: QuantBits::Q16,
                count: 4,
                ..DeviceGroup::default()
            }],
            workload: WorkloadSection {
                arrival: ArrivalMode::ClosedLoop,
                horizon_s: 60_000.0,
                ..WorkloadSection::default()
            },
            ..Config::default()
        }
    }
}

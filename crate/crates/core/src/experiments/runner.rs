//! Scenario runs, capacity searches and parameter sweeps.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::capacity::{capacity_search, CapacityResult};
use super::config::{Config, ModelSet};
use super::cost::system_cost_per_1k;
use super::metrics::{confidence_acceptance_histogram, measure_wstgr, TokenKind};
use super::pareto::{is_non_dominated, pareto_front, ParetoPoint};
use super::report::{
    write_csv, write_json, ConfidenceRow, DevicesRow, ExperimentReport, Fig4Row, Fig5Row, Fig7Row,
    Fig8Row, Fig9Row, LossPoint, TokenCounts,
};
use super::workload::ArrivalMode;
use super::world::{simulate, Scenario, WorldOutcome, WorldSpec};
use super::ExperimentError;
use crate::device::DraftingPolicy;
use crate::models::{LanguageModel, QuantBits};

const ALL_KINDS: [TokenKind; 4] = [
    TokenKind::Verified,
    TokenKind::Fallback,
    TokenKind::Generated,
    TokenKind::Draft,
];

/// Runs `scenario` with the configured fleet, or with the fleet resized to
/// `devices`.
pub fn run_scenario(
    cfg: &Config,
    models: &ModelSet,
    scenario: Scenario,
    devices: Option<usize>,
) -> Result<(ExperimentReport, WorldOutcome), ExperimentError> {
    let spec = cfg.world_spec(models, scenario, devices);
    run_spec(cfg, &spec)
}

pub fn run_spec(
    cfg: &Config,
    spec: &WorldSpec,
) -> Result<(ExperimentReport, WorldOutcome), ExperimentError> {
    let n = spec.devices.len();
    if n == 0 {
        return Err(ExperimentError::EmptyTrace);
    }
    let out = simulate(spec)?;
    let warmup = cfg.workload.warmup_fraction;
    let (start, end) = out.trace.window_ms(warmup);
    let window_s = (end - start) / 1000.0;
    let wstgr = measure_wstgr(&out.trace, spec.scenario.counted_kinds(), warmup)?;
    let edge = out.trace.count(&ALL_KINDS, warmup) as f64 / window_s / n as f64;
    let units = match cfg.units().len() == n {
        true => cfg.units(),
        false => cfg.units_n(n),
    };
    let mut hourly = 0.0;
    if spec.scenario.uses_devices() {
        hourly += units.iter().map(|u| u.hourly_usd()).sum::<f64>();
    }
    if spec.scenario.uses_server() {
        hourly += cfg.server_hourly_usd();
    }
    let histogram = if out.verdicts.is_empty() {
        None
    } else {
        Some(confidence_acceptance_histogram(&out.verdicts)?)
    };
    let tokens = TokenCounts {
        verified: out.trace.count(&[TokenKind::Verified], warmup),
        fallback: out.trace.count(&[TokenKind::Fallback], warmup),
        generated: out.trace.count(&[TokenKind::Generated], warmup),
        draft: out.trace.count(&[TokenKind::Draft], warmup),
    };
    let report = ExperimentReport {
        scenario: spec.scenario,
        arrival: spec.arrival,
        num_devices: n,
        horizon_s: spec.horizon_ms / 1000.0,
        window_s,
        wstgr,
        per_device_rate: wstgr / n as f64,
        edge_rate: edge,
        capacity: None,
        target_rate: cfg.experiment.target_rate,
        system_hourly_usd: hourly,
        cost_per_1k_usd: system_cost_per_1k(hourly, wstgr).ok(),
        acceptance_rate: histogram.as_ref().and_then(|h| h.acceptance_rate()),
        tokens,
        sessions_completed: out.sessions_completed,
        messages_sent: out.messages_sent,
        messages_dropped: out.messages_dropped,
        server: spec.scenario.uses_server().then_some(out.server),
        spearman: histogram.as_ref().and_then(|h| h.spearman()),
        histogram,
        quality: None,
        loss_series: Vec::new(),
        csv_paths: Vec::new(),
    };
    Ok((report, out))
}

/// Per-device rate at `n` devices, with nothing collected beyond the trace.
fn rate_at(
    cfg: &Config,
    models: &ModelSet,
    scenario: Scenario,
    n: usize,
) -> Result<f64, ExperimentError> {
    let mut spec = cfg.world_spec(models, scenario, Some(n));
    spec.collect_verdicts = false;
    spec.server.record_metrics = false;
    Ok(run_spec(cfg, &spec)?.0.per_device_rate)
}

/// Largest fleet that sustains the configured target rate per device.
pub fn capacity(
    cfg: &Config,
    models: &ModelSet,
    scenario: Scenario,
) -> Result<CapacityResult, ExperimentError> {
    capacity_search(
        |n| rate_at(cfg, models, scenario, n),
        cfg.experiment.target_rate,
        cfg.experiment.n_max,
    )
}

/// Runs the configured scenario and writes `report.json` plus CSVs to `out`.
pub fn write_simulation(
    cfg: &Config,
    scenario: Scenario,
    out: &Path,
) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()?;
    let models = cfg.build_models()?;
    let (mut report, outcome) = run_scenario(cfg, &models, scenario, None)?;
    if cfg.experiment.capacity && scenario.uses_server() {
        report.capacity = match capacity(cfg, &models, scenario) {
            Ok(c) => Some(c.capacity),
            Err(ExperimentError::Unsupportable { .. }) => Some(0.0),
            Err(e) => return Err(e),
        };
    }
    std::fs::create_dir_all(out)?;
    if !outcome.metrics.is_empty() {
        write_csv(&out.join("metrics.csv"), &outcome.metrics)?;
        report.csv_paths.push("metrics.csv".into());
    }
    if let Some(h) = &report.histogram {
        let rows: Vec<ConfidenceRow> = h.rows();
        write_csv(&out.join("fig3_confidence.csv"), &rows)?;
        report.csv_paths.push("fig3_confidence.csv".into());
    }
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Loss,
    Gamma,
    Batch,
    Devices,
    Quant,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Loss => "loss",
            SweepParam::Gamma => "gamma",
            SweepParam::Batch => "batch",
            SweepParam::Devices => "devices",
            SweepParam::Quant => "quant",
        }
    }

    /// The values configured in `[experiment]` for this parameter.
    pub fn default_values(self, cfg: &Config) -> Vec<f64> {
        let e = &cfg.experiment;
        match self {
            SweepParam::Loss => e.loss_rates.clone(),
            SweepParam::Gamma => e.gamma_values.iter().map(|&v| v as f64).collect(),
            SweepParam::Batch => e.batch_values.iter().map(|&v| v as f64).collect(),
            SweepParam::Devices => e.device_values.iter().map(|&v| v as f64).collect(),
            SweepParam::Quant => e.quant_values.iter().map(|q| f64::from(q.bits())).collect(),
        }
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loss" => Ok(SweepParam::Loss),
            "gamma" => Ok(SweepParam::Gamma),
            "batch" => Ok(SweepParam::Batch),
            "devices" => Ok(SweepParam::Devices),
            "quant" => Ok(SweepParam::Quant),
            other => Err(format!(
                "unknown sweep parameter {other:?} (expected loss, gamma, batch, devices or quant)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "param", content = "rows", rename_all = "lowercase")]
pub enum SweepResult {
    Loss(Vec<LossPoint>),
    Gamma(Vec<Fig5Row>),
    Batch(Vec<Fig4Row>),
    Devices(Vec<DevicesRow>),
    Quant(Vec<Fig7Row>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub result: SweepResult,
    pub csv_paths: Vec<String>,
}

fn as_count(v: f64, what: &str) -> Result<usize, ExperimentError> {
    if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(ExperimentError::Config(format!(
            "{what} must be a positive integer, got {v}"
        )))
    }
}

/// Runs one sweep and writes its figure CSVs and `sweep_<param>.json`.
pub fn run_sweep(
    cfg: &Config,
    param: SweepParam,
    values: &[f64],
    out: &Path,
) -> Result<SweepOutput, ExperimentError> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(ExperimentError::Config(
            "sweep needs at least one value".into(),
        ));
    }
    let result = match param {
        SweepParam::Loss => SweepResult::Loss(loss_sweep(cfg, values)?),
        SweepParam::Gamma => {
            let g: Vec<usize> = values
                .iter()
                .map(|&v| as_count(v, "gamma"))
                .collect::<Result<_, _>>()?;
            SweepResult::Gamma(gamma_sweep(cfg, &g)?)
        }
        SweepParam::Batch => {
            let b: Vec<usize> = values
                .iter()
                .map(|&v| as_count(v, "batch size"))
                .collect::<Result<_, _>>()?;
            SweepResult::Batch(batch_sweep(cfg, &b)?)
        }
        SweepParam::Devices => {
            let n: Vec<usize> = values
                .iter()
                .map(|&v| as_count(v, "device count"))
                .collect::<Result<_, _>>()?;
            SweepResult::Devices(devices_sweep(cfg, &n)?)
        }
        SweepParam::Quant => {
            let q: Vec<QuantBits> = values
                .iter()
                .map(|&v| {
                    QuantBits::try_from(as_count(v, "quantization")?.min(255) as u8)
                        .map_err(ExperimentError::Config)
                })
                .collect::<Result<_, _>>()?;
            SweepResult::Quant(quant_sweep(cfg, &q)?)
        }
    };
    std::fs::create_dir_all(out)?;
    let mut csv_paths = Vec::new();
    let mut csv = |name: &str| {
        csv_paths.push(name.to_owned());
        out.join(name)
    };
    match &result {
        SweepResult::Loss(points) => {
            let f8: Vec<Fig8Row> = points.iter().map(Fig8Row::from).collect();
            let f9: Vec<Fig9Row> = points.iter().map(Fig9Row::from).collect();
            write_csv(&csv("fig8_loss_throughput.csv"), &f8)?;
            write_csv(&csv("fig9_loss_quality.csv"), &f9)?;
        }
        SweepResult::Gamma(rows) => write_csv(&csv("fig5_tradeoff.csv"), rows)?,
        SweepResult::Batch(rows) => write_csv(&csv("fig4_wstgr.csv"), rows)?,
        SweepResult::Devices(rows) => write_csv(&csv("devices_wstgr.csv"), rows)?,
        SweepResult::Quant(rows) => write_csv(&csv("fig7_pareto.csv"), rows)?,
    }
    let output = SweepOutput { result, csv_paths };
    write_json(&out.join(format!("sweep_{}.json", param.as_str())), &output)?;
    Ok(output)
}

/// One closed-loop run per loss rate with the quality proxy collected.
pub fn loss_sweep(cfg: &Config, loss_rates: &[f64]) -> Result<Vec<LossPoint>, ExperimentError> {
    let models = cfg.build_models()?;
    let mut points = Vec::with_capacity(loss_rates.len());
    for &loss in loss_rates {
        if !(0.0..=1.0).contains(&loss) {
            return Err(ExperimentError::Config(format!(
                "loss rate {loss} outside [0, 1]"
            )));
        }
        points.push(loss_point(cfg, &models, loss)?);
    }
    Ok(points)
}

pub fn loss_point(
    cfg: &Config,
    models: &ModelSet,
    loss: f64,
) -> Result<LossPoint, ExperimentError> {
    let mut c = cfg.clone();
    c.network.loss_rate = loss;
    c.workload.arrival = ArrivalMode::ClosedLoop;
    let mut spec = c.world_spec(models, Scenario::Sled, None);
    spec.collect_verdicts = false;
    spec.collect_counts = true;
    spec.server.record_metrics = false;
    let (report, out) = run_spec(&c, &spec)?;
    let n = report.num_devices as f64;
    let draft = spec.devices[0].draft.clone();
    let target = models.target.clone() as std::sync::Arc<dyn LanguageModel>;
    let vs_target = out.counts.tv_against(target.as_ref())?;
    let vs_draft = out.counts.tv_against(draft.as_ref())?;
    let emitted = report.tokens.verified + report.tokens.fallback;
    Ok(LossPoint {
        loss_rate: loss,
        edge_throughput: emitted as f64 / report.window_s / n,
        verified_throughput: report.tokens.verified as f64 / report.window_s / n,
        fallback_fraction: if emitted > 0 {
            report.tokens.fallback as f64 / emitted as f64
        } else {
            0.0
        },
        draft_standalone_rate: spec
            .devices
            .iter()
            .map(|d| d.tokens_per_second)
            .sum::<f64>()
            / n,
        tv_distance: vs_target.tv,
        noise_floor: vs_target.noise_floor,
        draft_target_tv: out.counts.model_tv(draft.as_ref(), target.as_ref())?,
        draft_noise_floor: vs_draft.noise_floor,
        samples: vs_target.samples,
    })
}

fn with_gamma(cfg: &Config, gamma: usize) -> Config {
    let mut c = cfg.clone();
    for g in &mut c.devices {
        g.drafting = DraftingPolicy::FixedLength { gamma };
    }
    c
}

pub fn gamma_sweep(cfg: &Config, gammas: &[usize]) -> Result<Vec<Fig5Row>, ExperimentError> {
    let models = cfg.build_models()?;
    let mut rows = Vec::new();
    for &gamma in gammas {
        let c = with_gamma(cfg, gamma);
        let solo = rate_at(&c, &models, Scenario::Sled, 1)?;
        let (fleet, _) = run_scenario(&c, &models, Scenario::Sled, None)?;
        let capacity = match capacity(&c, &models, Scenario::Sled) {
            Ok(r) => Some(r.capacity),
            Err(ExperimentError::Unsupportable { .. }) => Some(0.0),
            Err(e) => return Err(e),
        };
        rows.push(Fig5Row {
            gamma,
            device_rate: solo,
            fleet_devices: fleet.num_devices,
            fleet_wstgr: fleet.wstgr,
            fleet_per_device_rate: fleet.per_device_rate,
            capacity,
            acceptance_rate: fleet.acceptance_rate,
        });
    }
    Ok(rows)
}

pub fn batch_sweep(cfg: &Config, batches: &[usize]) -> Result<Vec<Fig4Row>, ExperimentError> {
    let models = cfg.build_models()?;
    let mut rows = Vec::new();
    for &b in batches {
        let mut c = cfg.clone();
        c.server.batch_size = b;
        c.server.record_metrics = false;
        let (sled, _) = run_scenario(&c, &models, Scenario::Sled, None)?;
        let (cent, _) = run_scenario(&c, &models, Scenario::Centralized, None)?;
        rows.push(Fig4Row {
            batch_size: b,
            sled_wstgr: sled.wstgr,
            centralized_wstgr: cent.wstgr,
            ratio: if cent.wstgr > 0.0 {
                sled.wstgr / cent.wstgr
            } else {
                f64::INFINITY
            },
        });
    }
    Ok(rows)
}

pub fn devices_sweep(cfg: &Config, counts: &[usize]) -> Result<Vec<DevicesRow>, ExperimentError> {
    let models = cfg.build_models()?;
    let mut c = cfg.clone();
    c.server.record_metrics = false;
    let mut rows = Vec::new();
    for &n in counts {
        let (sled, _) = run_scenario(&c, &models, Scenario::Sled, Some(n))?;
        let (cent, _) = run_scenario(&c, &models, Scenario::Centralized, Some(n))?;
        let (edge, _) = run_scenario(&c, &models, Scenario::EdgeOnly, Some(n))?;
        rows.push(DevicesRow {
            devices: n,
            sled_wstgr: sled.wstgr,
            centralized_wstgr: cent.wstgr,
            edge_only_wstgr: edge.wstgr,
            sled_per_device_rate: sled.per_device_rate,
            centralized_per_device_rate: cent.per_device_rate,
        });
    }
    Ok(rows)
}

pub fn quant_sweep(cfg: &Config, quants: &[QuantBits]) -> Result<Vec<Fig7Row>, ExperimentError> {
    let models = cfg.build_models()?;
    let mut base = cfg.clone();
    base.server.record_metrics = false;
    let n = base.num_devices();
    let mut labelled: Vec<(Fig7Row, ParetoPoint)> = Vec::new();
    let mut push = |strategy: Scenario, quant: Option<QuantBits>, r: &ExperimentReport| {
        let label = match quant {
            Some(q) => format!("{}/q{}/n{}", strategy.as_str(), q.bits(), n),
            None => format!("{}/n{}", strategy.as_str(), n),
        };
        let cost = r.cost_per_1k_usd.unwrap_or(f64::INFINITY);
        labelled.push((
            Fig7Row {
                label: label.clone(),
                strategy: strategy.as_str().into(),
                quant_bits: quant.map(QuantBits::bits),
                devices: n,
                wstgr: r.wstgr,
                cost_per_1k_usd: cost,
                on_front: false,
            },
            ParetoPoint {
                cost_per_1k_usd: cost,
                wstgr: r.wstgr,
                label,
            },
        ));
    };
    for &q in quants {
        let mut c = base.clone();
        for g in &mut c.devices {
            g.quant = q;
        }
        for s in [Scenario::Sled, Scenario::EdgeOnly] {
            let (r, _) = run_scenario(&c, &models, s, None)?;
            push(s, Some(q), &r);
        }
    }
    let (r, _) = run_scenario(&base, &models, Scenario::Centralized, None)?;
    push(Scenario::Centralized, None, &r);
    let points: Vec<ParetoPoint> = labelled.iter().map(|(_, p)| p.clone()).collect();
    let front = pareto_front(&points);
    if !is_non_dominated(&front, &points) {
        return Err(ExperimentError::Domain(
            "pareto front contains a dominated point".into(),
        ));
    }
    Ok(labelled
        .into_iter()
        .map(|(mut row, p)| {
            row.on_front = front.iter().any(|f| f.label == p.label);
            row
        })
        .collect())
}

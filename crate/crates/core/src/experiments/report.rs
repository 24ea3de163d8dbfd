//! Report types and their JSON and CSV encodings.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{ConfidenceHistogram, TvEstimate};
use super::workload::ArrivalMode;
use super::world::Scenario;
use super::ExperimentError;
use crate::server::ServerStats;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub verified: u64,
    pub fallback: u64,
    pub generated: u64,
    pub draft: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: Scenario,
    pub arrival: ArrivalMode,
    pub num_devices: usize,
    pub horizon_s: f64,
    pub window_s: f64,
    /// Whole-system token generation rate, tokens per second.
    pub wstgr: f64,
    pub per_device_rate: f64,
    /// Every token a device emitted, verified or not, per device per second.
    pub edge_rate: f64,
    pub capacity: Option<f64>,
    pub target_rate: f64,
    pub system_hourly_usd: f64,
    pub cost_per_1k_usd: Option<f64>,
    pub acceptance_rate: Option<f64>,
    /// Window token counts by kind.
    pub tokens: TokenCounts,
    pub sessions_completed: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub server: Option<ServerStats>,
    pub histogram: Option<ConfidenceHistogram>,
    pub spearman: Option<f64>,
    pub quality: Option<TvEstimate>,
    pub loss_series: Vec<LossPoint>,
    pub csv_paths: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub loss_rate: f64,
    /// Verified plus fallback tokens per device per second.
    pub edge_throughput: f64,
    pub verified_throughput: f64,
    pub fallback_fraction: f64,
    pub draft_standalone_rate: f64,
    pub tv_distance: f64,
    pub noise_floor: f64,
    /// TV between draft and target over the same contexts.
    pub draft_target_tv: f64,
    /// Noise floor of the estimate if every token came from the draft.
    pub draft_noise_floor: f64,
    pub samples: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig4Row {
    pub batch_size: usize,
    pub sled_wstgr: f64,
    pub centralized_wstgr: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig5Row {
    pub gamma: usize,
    /// Rate of a single device with the server to itself.
    pub device_rate: f64,
    pub fleet_devices: usize,
    pub fleet_wstgr: f64,
    pub fleet_per_device_rate: f64,
    pub capacity: Option<f64>,
    pub acceptance_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevicesRow {
    pub devices: usize,
    pub sled_wstgr: f64,
    pub centralized_wstgr: f64,
    pub edge_only_wstgr: f64,
    pub sled_per_device_rate: f64,
    pub centralized_per_device_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig7Row {
    pub label: String,
    pub strategy: String,
    pub quant_bits: Option<u8>,
    pub devices: usize,
    pub wstgr: f64,
    pub cost_per_1k_usd: f64,
    pub on_front: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig8Row {
    pub loss_rate: f64,
    pub edge_throughput: f64,
    pub verified_throughput: f64,
    pub draft_standalone_rate: f64,
    pub fallback_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig9Row {
    pub loss_rate: f64,
    pub tv_distance: f64,
    pub noise_floor: f64,
    pub draft_target_tv: f64,
    pub draft_noise_floor: f64,
    pub samples: u64,
}

impl From<&LossPoint> for Fig8Row {
    fn from(p: &LossPoint) -> Self {
        Self {
            loss_rate: p.loss_rate,
            edge_throughput: p.edge_throughput,
            verified_throughput: p.verified_throughput,
            draft_standalone_rate: p.draft_standalone_rate,
            fallback_fraction: p.fallback_fraction,
        }
    }
}

impl From<&LossPoint> for Fig9Row {
    fn from(p: &LossPoint) -> Self {
        Self {
            loss_rate: p.loss_rate,
            tv_distance: p.tv_distance,
            noise_floor: p.noise_floor,
            draft_target_tv: p.draft_target_tv,
            draft_noise_floor: p.draft_noise_floor,
            samples: p.samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub samples: u64,
    pub accepted: u64,
    pub acceptance_rate: Option<f64>,
    pub low_confidence_estimate: bool,
}

impl ConfidenceHistogram {
    pub fn rows(&self) -> Vec<ConfidenceRow> {
        self.bins
            .iter()
            .map(|b| ConfidenceRow {
                bin_lo: b.lo,
                bin_hi: b.hi,
                samples: b.samples,
                accepted: b.accepted,
                acceptance_rate: b.acceptance_rate,
                low_confidence_estimate: b.low_confidence_estimate,
            })
            .collect()
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

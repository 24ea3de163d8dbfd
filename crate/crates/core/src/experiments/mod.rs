//! Evaluation harness: workloads, the fleet simulation, metrics, cost,
//! capacity search and parameter sweeps.

pub mod calibration;
pub mod capacity;
pub mod config;
pub mod cost;
pub mod metrics;
pub mod pareto;
pub mod report;
pub mod runner;
pub mod workload;
pub mod world;

use thiserror::Error;

use crate::device::DeviceError;
use crate::models::ModelError;
use crate::netsim::NetError;
use crate::server::ServerError;
use crate::specdec::SpecError;

pub use capacity::{capacity_search, CapacityResult, RatePoint};
pub use config::Config;
pub use cost::{cost_per_1k_tokens, CostParams};
pub use metrics::{confidence_acceptance_histogram, measure_wstgr, CommitTrace, TokenKind};
pub use pareto::{pareto_front, ParetoPoint};
pub use report::ExperimentReport;
pub use runner::{run_scenario, SweepParam};
pub use workload::{poisson_arrivals, ArrivalMode};
pub use world::{simulate, Scenario, WorldSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("trace has no commits in the measurement window")]
    EmptyTrace,
    #[error(
        "target rate {target_rate} tokens/s not reached even by one device (best {best_rate:.3})"
    )]
    Unsupportable { target_rate: f64, best_rate: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

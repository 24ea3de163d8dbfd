use serde::{Deserialize, Serialize};

use super::ExperimentError;

pub const LIFETIME_YEARS: f64 = 3.0;
pub const HOURS_PER_YEAR: f64 = 8760.0;
pub const UTILIZATION: f64 = 0.70;
pub const ELECTRICITY_USD_PER_KWH: f64 = 0.083;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub device_price_usd: f64,
    pub lifetime_years: f64,
    pub hours_per_year: f64,
    pub utilization: f64,
    pub avg_power_watts: f64,
    pub electricity_usd_per_kwh: f64,
    /// Tokens per second.
    pub rate: f64,
}

impl CostParams {
    pub fn new(rate: f64, device_price_usd: f64, avg_power_watts: f64) -> Self {
        Self {
            device_price_usd,
            lifetime_years: LIFETIME_YEARS,
            hours_per_year: HOURS_PER_YEAR,
            utilization: UTILIZATION,
            avg_power_watts,
            electricity_usd_per_kwh: ELECTRICITY_USD_PER_KWH,
            rate,
        }
    }

    /// Amortized purchase price plus electricity, dollars per hour.
    pub fn hourly_usd(&self) -> f64 {
        self.device_price_usd / (self.lifetime_years * self.hours_per_year * self.utilization)
            + self.avg_power_watts / 1000.0 * self.electricity_usd_per_kwh
    }
}

/// Dollars per thousand tokens: `1000 / (3600 R)` times the hourly cost.
pub fn cost_per_1k_tokens(p: &CostParams) -> Result<f64, ExperimentError> {
    if !(p.rate > 0.0 && p.rate.is_finite()) {
        return Err(ExperimentError::Domain(format!(
            "rate must be > 0, got {}",
            p.rate
        )));
    }
    for (name, v) in [
        ("device price", p.device_price_usd),
        ("power", p.avg_power_watts),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(ExperimentError::Domain(format!("{name} must be >= 0")));
        }
    }
    for (name, v) in [
        ("lifetime", p.lifetime_years),
        ("hours per year", p.hours_per_year),
        ("utilization", p.utilization),
        ("electricity price", p.electricity_usd_per_kwh),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(ExperimentError::Domain(format!("{name} must be > 0")));
        }
    }
    Ok(1000.0 / (3600.0 * p.rate) * p.hourly_usd())
}

/// Hourly cost of a whole system divided into its token rate.
pub fn system_cost_per_1k(hourly_usd: f64, tokens_per_s: f64) -> Result<f64, ExperimentError> {
    if tokens_per_s.is_nan() || tokens_per_s <= 0.0 {
        return Err(ExperimentError::Domain("system rate must be > 0".into()));
    }
    Ok(1000.0 / (3600.0 * tokens_per_s) * hourly_usd)
}

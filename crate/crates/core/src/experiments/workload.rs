use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalMode {
    /// Each device is an independent Poisson source of verification (or
    /// generation) requests at its drafting rate.
    #[default]
    OpenLoop,
    /// Devices run back-to-back sessions and pace themselves.
    ClosedLoop,
}

/// Poisson arrival times in seconds over `[0, horizon_s)`.
pub fn poisson_arrivals(
    lambda: f64,
    horizon_s: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>, ExperimentError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(ExperimentError::Domain(format!(
            "lambda must be > 0, got {lambda}"
        )));
    }
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        t += exponential(lambda, rng);
        if t >= horizon_s {
            return Ok(out);
        }
        out.push(t);
    }
}

/// One exponential inter-arrival draw with rate `lambda`.
pub fn exponential(lambda: f64, rng: &mut RngStream) -> f64 {
    // 1 - u lies in (0, 1], so the log is finite.
    -libm::log(1.0 - rng.uniform()) / lambda
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_inter_arrival() {
        let mut rng = RngStream::new(3, 0, "arrivals");
        let horizon = 50_000.0;
        let ts = poisson_arrivals(2.0, horizon, &mut rng).unwrap();
        let mean = ts.last().unwrap() / ts.len() as f64;
        assert!((mean - 0.5).abs() < 0.005, "{mean}");
        let sigma = (2.0f64 * horizon).sqrt();
        assert!((ts.len() as f64 - 2.0 * horizon).abs() < 3.0 * sigma);
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn degenerate_inputs() {
        let mut rng = RngStream::new(3, 0, "arrivals");
        assert!(poisson_arrivals(2.0, 0.0, &mut rng).unwrap().is_empty());
        assert!(poisson_arrivals(0.0, 10.0, &mut rng).is_err());
        assert!(poisson_arrivals(-1.0, 10.0, &mut rng).is_err());
    }
}

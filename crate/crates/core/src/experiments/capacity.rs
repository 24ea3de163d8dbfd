use serde::{Deserialize, Serialize};

use super::ExperimentError;

/// Per-device rate measured at one device count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub devices: usize,
    pub per_device_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityResult {
    pub capacity: f64,
    pub target_rate: f64,
    pub curve: Vec<RatePoint>,
    /// True if every count up to `n_max` met the target.
    pub truncated: bool,
}

/// Largest device count that sustains `target_rate` per device.
///
/// Counts are tried in increasing order. With `N` the last passing count,
/// the result interpolates linearly between `N` and `N + 1` on the
/// per-device rate. `rate_at` is called at most once per count.
pub fn capacity_search<F>(
    mut rate_at: F,
    target_rate: f64,
    n_max: usize,
) -> Result<CapacityResult, ExperimentError>
where
    F: FnMut(usize) -> Result<f64, ExperimentError>,
{
    if !(target_rate > 0.0 && target_rate.is_finite()) {
        return Err(ExperimentError::Domain("target rate must be > 0".into()));
    }
    if n_max == 0 {
        return Err(ExperimentError::Domain("n_max must be >= 1".into()));
    }
    let mut curve = Vec::new();
    for n in 1..=n_max {
        let r = rate_at(n)?;
        curve.push(RatePoint {
            devices: n,
            per_device_rate: r,
        });
        if r < target_rate {
            if n == 1 {
                return Err(ExperimentError::Unsupportable {
                    target_rate,
                    best_rate: r,
                });
            }
            let prev = curve[n - 2].per_device_rate;
            let frac = if prev > r {
                ((prev - target_rate) / (prev - r)).clamp(0.0, 1.0)
            } else {
                0.0
            };
            return Ok(CapacityResult {
                capacity: (n - 1) as f64 + frac,
                target_rate,
                curve,
                truncated: false,
            });
        }
    }
    Ok(CapacityResult {
        capacity: n_max as f64,
        target_rate,
        curve,
        truncated: true,
    })
}

/// Re-evaluates capacity on an already measured curve.
pub fn capacity_from_curve(curve: &[RatePoint], target_rate: f64) -> Result<f64, ExperimentError> {
    let mut it = curve.iter();
    capacity_search(
        |n| {
            it.next()
                .filter(|p| p.devices == n)
                .map(|p| p.per_device_rate)
                .ok_or_else(|| ExperimentError::Domain(format!("curve has no point for {n}")))
        },
        target_rate,
        curve.len(),
    )
    .map(|r| r.capacity)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A server that serves exactly `k * lambda` requests per second: every
    /// device gets its full rate up to `k` devices, then the rate is shared.
    fn saturating(k: usize, per_device: f64) -> impl FnMut(usize) -> Result<f64, ExperimentError> {
        move |n| Ok(per_device * (k as f64 / n as f64).min(1.0))
    }

    #[test]
    fn analytic_capacity() {
        let r = capacity_search(saturating(6, 10.0), 10.0, 50).unwrap();
        assert_eq!(r.capacity, 6.0);
        // Rate 10 at 6, 60/7 at 7: target 9 lies 1/(10 - 60/7) of the way.
        let r = capacity_search(saturating(6, 10.0), 9.0, 50).unwrap();
        assert!((r.capacity - (6.0 + 1.0 / (10.0 - 60.0 / 7.0))).abs() < 1e-12);
    }

    #[test]
    fn unsupportable() {
        assert!(matches!(
            capacity_search(saturating(6, 10.0), 11.0, 50),
            Err(ExperimentError::Unsupportable { .. })
        ));
    }

    #[test]
    fn monotone_in_target() {
        let curve = capacity_search(saturating(9, 10.0), 0.5, 30).unwrap().curve;
        let mut last = f64::INFINITY;
        for t in [1.0, 2.0, 3.5, 5.0, 7.0, 9.0, 10.0] {
            let c = capacity_from_curve(&curve, t).unwrap();
            assert!(c <= last);
            last = c;
        }
    }
}

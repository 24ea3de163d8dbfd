use proptest::prelude::*;
use sled_core::experiments::capacity::{capacity_from_curve, RatePoint};
use sled_core::experiments::cost::system_cost_per_1k;
use sled_core::experiments::metrics::{ranks, spearman};
use sled_core::experiments::pareto::dominates;
use sled_core::experiments::runner::write_simulation;
use sled_core::experiments::*;
use sled_core::RngStream;

fn small(horizon_s: f64) -> Config {
    let mut cfg = Config::default();
    cfg.workload.horizon_s = horizon_s;
    cfg.experiment.capacity = false;
    cfg
}

#[test]
fn cost_examples() {
    // 80 / (3 * 8760 * 0.7) + 0.008 * 0.083 = 0.0050124..., over 3.6 * R.
    let hourly = 80.0 / (3.0 * 8760.0 * 0.7) + 8.0 / 1000.0 * 0.083;
    let c = cost_per_1k_tokens(&CostParams::new(5.24, 80.0, 8.0)).unwrap();
    assert!((c - hourly / (3.6 * 5.24)).abs() < 1e-15);
    assert!((c - 2.6573e-4).abs() < 1e-8, "{c}");
    let one = cost_per_1k_tokens(&CostParams::new(1.0, 80.0, 8.0)).unwrap();
    assert!((one / c - 5.24).abs() < 1e-9);
    assert!(cost_per_1k_tokens(&CostParams::new(0.0, 80.0, 8.0)).is_err());
    assert!(cost_per_1k_tokens(&CostParams::new(1.0, -1.0, 8.0)).is_err());
    assert!((system_cost_per_1k(3.6, 1.0).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn rank_correlation_examples() {
    assert_eq!(ranks(&[3.0, 1.0, 2.0, 1.0]), vec![4.0, 1.5, 3.0, 1.5]);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
    assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    assert_eq!(spearman(&[1.0], &[1.0]), None);
}

#[test]
fn wstgr_of_a_hand_trace() {
    let mut t = CommitTrace::new(10_000.0);
    t.push(500.0, 0, 7, TokenKind::Verified);
    t.push(1_000.0, 0, 5, TokenKind::Verified);
    t.push(5_000.0, 1, 4, TokenKind::Fallback);
    t.push(9_999.0, 1, 3, TokenKind::Verified);
    t.push(10_000.0, 1, 100, TokenKind::Verified);
    // The first record falls in the warm-up, the last at the horizon.
    let w = measure_wstgr(&t, &[TokenKind::Verified], 0.1).unwrap();
    assert!((w - 8.0 / 9.0).abs() < 1e-12);
    let w = measure_wstgr(&t, &[TokenKind::Verified, TokenKind::Fallback], 0.1).unwrap();
    assert!((w - 12.0 / 9.0).abs() < 1e-12);
    assert!(measure_wstgr(&CommitTrace::new(1000.0), &[TokenKind::Verified], 0.1).is_err());
}

#[test]
fn edge_only_throughput_is_additive() {
    let cfg = small(600.0);
    let models = cfg.build_models().unwrap();
    let (one, _) = run_scenario(&cfg, &models, Scenario::EdgeOnly, Some(1)).unwrap();
    for n in [4, 16] {
        let (many, _) = run_scenario(&cfg, &models, Scenario::EdgeOnly, Some(n)).unwrap();
        let ratio = many.wstgr / (n as f64 * one.wstgr);
        assert!((ratio - 1.0).abs() <= 0.05, "n {n}: ratio {ratio}");
        assert!(many.server.is_none());
    }
}

#[test]
fn sled_counts_only_verified_tokens_without_loss() {
    let cfg = small(300.0);
    let models = cfg.build_models().unwrap();
    let (r, _) = run_scenario(&cfg, &models, Scenario::Sled, Some(4)).unwrap();
    assert_eq!(r.tokens.fallback, 0);
    assert!(r.tokens.verified > 0);
    assert_eq!(r.messages_dropped, 0);
    let a = r.acceptance_rate.unwrap();
    assert!(a > 0.0 && a < 1.0);
    let (c, _) = run_scenario(&cfg, &models, Scenario::Centralized, Some(4)).unwrap();
    assert!(c.tokens.generated > 0 && c.tokens.verified == 0);
}

#[test]
fn simulation_output_is_deterministic() {
    let cfg = small(120.0);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_simulation(&cfg, Scenario::Sled, a.path()).unwrap();
    write_simulation(&cfg, Scenario::Sled, b.path()).unwrap();
    for f in ["report.json", "fig3_confidence.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    let mut other = cfg.clone();
    other.seeds.root ^= 1;
    let c = tempfile::tempdir().unwrap();
    write_simulation(&other, Scenario::Sled, c.path()).unwrap();
    assert_ne!(
        std::fs::read(a.path().join("report.json")).unwrap(),
        std::fs::read(c.path().join("report.json")).unwrap()
    );
}

#[test]
fn poisson_counts() {
    for (lambda, horizon) in [(0.5, 20_000.0), (5.0, 4_000.0), (40.0, 500.0)] {
        let mut rng = RngStream::new(11, 0, "arrivals");
        let ts = poisson_arrivals(lambda, horizon, &mut rng).unwrap();
        let mean = lambda * horizon;
        assert!(
            (ts.len() as f64 - mean).abs() <= 3.0 * mean.sqrt(),
            "lambda {lambda}"
        );
        assert!(ts.iter().all(|&t| (0.0..horizon).contains(&t)));
    }
    assert!(poisson_arrivals(0.0, 1.0, &mut RngStream::new(1, 0, "a")).is_err());
}

fn curve(rates: &[f64]) -> Vec<RatePoint> {
    rates
        .iter()
        .enumerate()
        .map(|(i, &r)| RatePoint {
            devices: i + 1,
            per_device_rate: r,
        })
        .collect()
}

fn pt(c: f64, w: f64, label: usize) -> ParetoPoint {
    ParetoPoint {
        cost_per_1k_usd: c,
        wstgr: w,
        label: format!("p{label}"),
    }
}

proptest! {
    #[test]
    fn cost_monotone(r in 0.01f64..1000.0, k in 1.0001f64..10.0, price in 0.0f64..20_000.0, watts in 0.0f64..500.0) {
        let c = |r: f64, p: f64, w: f64| cost_per_1k_tokens(&CostParams::new(r, p, w)).unwrap();
        prop_assert!(c(r * k, price, watts) <= c(r, price, watts));
        prop_assert!(c(r, price * k + 1.0, watts) > c(r, price, watts));
        prop_assert!(c(r, price, watts * k + 1.0) > c(r, price, watts));
    }

    #[test]
    fn capacity_non_increasing_in_target(
        drops in prop::collection::vec(0.0f64..5.0, 1..30),
        start in 1.0f64..100.0,
        t1 in 0.5f64..100.0,
        t2 in 0.5f64..100.0,
    ) {
        let mut rates = Vec::new();
        let mut r = start;
        for d in drops {
            rates.push(r);
            r = (r - d).max(0.0);
        }
        let c = curve(&rates);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let at = |t: f64| match capacity_from_curve(&c, t) {
            Ok(v) => v,
            Err(ExperimentError::Unsupportable { .. }) => 0.0,
            Err(e) => panic!("{e}"),
        };
        prop_assert!(at(hi) <= at(lo) + 1e-12);
        let v = at(lo);
        prop_assert!(v >= 0.0 && v <= rates.len() as f64);
    }

    #[test]
    fn pareto_front_is_exactly_the_undominated_set(
        raw in prop::collection::vec((0u8..12, 0u8..12), 0..40)
    ) {
        let points: Vec<ParetoPoint> = raw
            .iter()
            .enumerate()
            .map(|(i, &(c, w))| pt(c as f64, w as f64, i))
            .collect();
        let front = pareto_front(&points);
        let mut brute: Vec<String> = points
            .iter()
            .filter(|p| !points.iter().any(|q| dominates(q, p)))
            .map(|p| p.label.clone())
            .collect();
        let mut got: Vec<String> = front.iter().map(|p| p.label.clone()).collect();
        brute.sort();
        got.sort();
        prop_assert_eq!(got, brute);
        prop_assert!(front.windows(2).all(|w| w[0].cost_per_1k_usd <= w[1].cost_per_1k_usd));
    }

    #[test]
    fn spearman_is_bounded_and_rank_invariant(xs in prop::collection::vec(-100.0f64..100.0, 2..30), seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0, "ys");
        let ys: Vec<f64> = xs.iter().map(|_| rng.uniform()).collect();
        if let Some(r) = spearman(&xs, &ys) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            let cubed: Vec<f64> = xs.iter().map(|x| x * x * x).collect();
            prop_assert!((spearman(&cubed, &ys).unwrap() - r).abs() < 1e-9);
        }
    }
}

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub cost_per_1k_usd: f64,
    pub wstgr: f64,
    pub label: String,
}

/// `a` dominates `b`: no more expensive, no slower, strictly better in one.
pub fn dominates(a: &ParetoPoint, b: &ParetoPoint) -> bool {
    a.cost_per_1k_usd <= b.cost_per_1k_usd
        && a.wstgr >= b.wstgr
        && (a.cost_per_1k_usd < b.cost_per_1k_usd || a.wstgr > b.wstgr)
}

/// Non-dominated points sorted by cost, then throughput descending, then
/// label. Exact ties are all kept.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut sorted: Vec<&ParetoPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.cost_per_1k_usd
            .total_cmp(&b.cost_per_1k_usd)
            .then(b.wstgr.total_cmp(&a.wstgr))
            .then(a.label.cmp(&b.label))
    });
    let mut front: Vec<ParetoPoint> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        // Points sharing a cost: only those with the group's top throughput
        // can survive, and only if they beat everything cheaper.
        let cost = sorted[i].cost_per_1k_usd;
        let top = sorted[i].wstgr;
        let mut j = i;
        while j < sorted.len() && sorted[j].cost_per_1k_usd == cost {
            if sorted[j].wstgr == top && top > best {
                front.push(sorted[j].clone());
            }
            j += 1;
        }
        best = best.max(top);
        i = j;
    }
    front
}

/// Quadratic reference check that no returned point is dominated.
pub fn is_non_dominated(front: &[ParetoPoint], all: &[ParetoPoint]) -> bool {
    front.iter().all(|p| !all.iter().any(|q| dominates(q, p)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(c: f64, w: f64) -> ParetoPoint {
        ParetoPoint {
            cost_per_1k_usd: c,
            wstgr: w,
            label: format!("{c}/{w}"),
        }
    }

    #[test]
    fn examples() {
        let pts = vec![pt(1.0, 10.0), pt(2.0, 5.0), pt(3.0, 20.0)];
        let f = pareto_front(&pts);
        assert_eq!(f, vec![pt(1.0, 10.0), pt(3.0, 20.0)]);
        assert_eq!(pareto_front(&[pt(1.0, 1.0)]), vec![pt(1.0, 1.0)]);
        let same = vec![pt(1.0, 1.0), pt(1.0, 1.0), pt(1.0, 1.0)];
        assert_eq!(pareto_front(&same).len(), 3);
    }

    #[test]
    fn equal_throughput_keeps_cheapest() {
        let f = pareto_front(&[pt(1.0, 5.0), pt(2.0, 5.0)]);
        assert_eq!(f, vec![pt(1.0, 5.0)]);
    }
}

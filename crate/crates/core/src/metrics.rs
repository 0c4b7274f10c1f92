//! Threshold matching of detections to annotations and the MODA / MODP /
//! precision / recall / F1 scores.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::localization::DotMap;

/// Default matching threshold in meters.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchingOutcome {
    /// `(pred index, gt index, distance in meters)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub moda: f64,
    pub modp: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Matches predictions to annotations within distance `t`: the largest
/// possible number of pairs, and among those the smallest total distance.
pub fn match_points(pred: &DotMap, gt: &DotMap, t: f64) -> Result<MatchingOutcome> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(invalid(format!("match threshold must be positive, got {t}")));
    }
    let (np, ng) = (pred.len(), gt.len());
    let size = np.max(ng);
    let mut pairs = Vec::new();
    if np > 0 && ng > 0 {
        // Any forbidden assignment costs more than every allowed one combined,
        // so minimizing the total first maximizes the number of allowed pairs.
        let forbidden = (t + 1.0) * (size as f64 + 1.0);
        let mut cost = vec![vec![forbidden; size]; size];
        let mut dist = vec![vec![f64::INFINITY; ng]; np];
        for (i, p) in pred.points.iter().enumerate() {
            for (j, g) in gt.points.iter().enumerate() {
                let d = (p - g).norm();
                dist[i][j] = d;
                if d <= t {
                    cost[i][j] = d;
                }
            }
        }
        let assignment = hungarian(&cost);
        for (i, &j) in assignment.iter().enumerate() {
            if i < np && j < ng && dist[i][j] <= t {
                pairs.push((i, j, dist[i][j]));
            }
        }
    }
    let tp = pairs.len();
    Ok(MatchingOutcome {
        pairs,
        tp,
        fp: np - tp,
        fn_: ng - tp,
        threshold: t,
    })
}

/// Minimum-cost perfect assignment on a square matrix; `result[row] = col`.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

pub fn compute_metrics(outcome: &MatchingOutcome) -> Result<MetricsReport> {
    let (tp, fp, fn_) = (outcome.tp as f64, outcome.fp as f64, outcome.fn_ as f64);
    if outcome.tp + outcome.fn_ == 0 {
        return Err(invalid("metrics need at least one ground-truth point"));
    }
    let moda = 1.0 - (fp + fn_) / (tp + fn_);
    let modp = if outcome.tp == 0 {
        0.0
    } else {
        outcome
            .pairs
            .iter()
            .map(|(_, _, d)| 1.0 - d / outcome.threshold)
            .sum::<f64>()
            / tp
    };
    let precision = if outcome.tp + outcome.fp == 0 { 0.0 } else { tp / (tp + fp) };
    let recall = tp / (tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricsReport {
        moda,
        modp,
        precision,
        recall,
        f1,
    })
}

/// Convenience wrapper: match then score.
pub fn evaluate(pred: &DotMap, gt: &DotMap, t: f64) -> Result<(MatchingOutcome, MetricsReport)> {
    let outcome = match_points(pred, gt, t)?;
    let report = compute_metrics(&outcome)?;
    Ok((outcome, report))
}

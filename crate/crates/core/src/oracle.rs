//! Reference solver for small transport problems, used to check the scaling
//! solver.
//!
//! The annotation-side penalty `tau |c - b|_1` is written as
//! `max_{s in [-1, 1]^m} tau <s, c - b>`, which turns the problem into a
//! concave maximization over the box. For fixed `s` the inner minimization
//! over `P` separates by row and each row reduces to a scalar monotone
//! equation, solved here by plain bisection. The outer problem is solved by
//! projected gradient ascent from several starting points. The gap between
//! the primal objective at `P(s)` and the dual value certifies the result.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::uot::{uot_objective, TransportPlan, UotParams, UotResult};

pub const MAX_ORACLE_ENTRIES: usize = 64;
const STARTS: usize = 5;
const MAX_ASCENT_ITERS: usize = 200_000;
const PG_TOLERANCE: f64 = 1e-8;
const ORACLE_SEED: u64 = 0x5eed_0a11;

struct Inner {
    plan: Array2<f64>,
    dual: f64,
    grad: Vec<f64>,
}

/// Minimizes the same objective as [`crate::uot::solve_uot`] by an
/// independent route. Limited to `n * m <= 64`.
pub fn brute_force_solve(a: &[f64], b: &[f64], cost: &ArrayView2<f64>, params: &UotParams) -> Result<UotResult> {
    params.validate()?;
    let (n, m) = cost.dim();
    if n * m > MAX_ORACLE_ENTRIES {
        return Err(invalid(format!(
            "oracle instance too large: {n}x{m} exceeds {MAX_ORACLE_ENTRIES} entries"
        )));
    }
    if a.len() != n || b.len() != m {
        return Err(invalid("dimension mismatch"));
    }
    if a.iter().chain(b).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(invalid("marginals must be finite and non-negative"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(ORACLE_SEED);
    let mut best: Option<(f64, Array2<f64>, bool)> = None;
    let mut total_iters = 0;
    for start in 0..STARTS {
        let s0: Vec<f64> = if start == 0 {
            vec![0.0; m]
        } else {
            (0..m).map(|_| rng.random_range(-1.0..=1.0)).collect()
        };
        let (plan, iters, certified) = ascend(a, b, cost, params, s0);
        total_iters += iters;
        let primal = uot_objective(&plan.view(), a, b, cost, params);
        if best.as_ref().is_none_or(|(f, _, _)| primal < *f) {
            best = Some((primal, plan, certified));
        }
    }
    let (loss, values, converged) = best.expect("at least one start");
    let plan = TransportPlan { values };
    let row_marginal = plan.row_sums();
    let col_marginal = plan.col_sums();
    let grad_density = a
        .iter()
        .zip(&row_marginal)
        .map(|(a, r)| 2.0 * params.tau * (a - r))
        .collect();
    Ok(UotResult {
        loss,
        plan,
        row_marginal,
        col_marginal,
        grad_density,
        iterations: total_iters,
        converged,
    })
}

fn ascend(a: &[f64], b: &[f64], cost: &ArrayView2<f64>, params: &UotParams, mut s: Vec<f64>) -> (Array2<f64>, usize, bool) {
    let tau = params.tau;
    let mut cur = inner(a, b, cost, params, &s);
    if tau == 0.0 {
        return (cur.plan, 0, true);
    }
    let mut step = 1.0 / (tau * tau / params.epsilon).max(1e-12);
    for it in 1..=MAX_ASCENT_ITERS {
        let pg: f64 = s
            .iter()
            .zip(&cur.grad)
            .map(|(si, g)| ((si + g).clamp(-1.0, 1.0) - si).powi(2))
            .sum::<f64>()
            .sqrt();
        let primal = uot_objective(&cur.plan.view(), a, b, cost, params);
        let gap = primal - cur.dual;
        if pg < PG_TOLERANCE || gap <= 1e-13 * primal.abs().max(1.0) {
            return (cur.plan, it, true);
        }
        loop {
            let trial: Vec<f64> = s
                .iter()
                .zip(&cur.grad)
                .map(|(si, g)| (si + step * g).clamp(-1.0, 1.0))
                .collect();
            let next = inner(a, b, cost, params, &trial);
            let lin: f64 = trial
                .iter()
                .zip(&s)
                .zip(&cur.grad)
                .map(|((t, si), g)| g * (t - si) - (t - si).powi(2) / (2.0 * step))
                .sum();
            if next.dual >= cur.dual + lin - 1e-15 * cur.dual.abs() || step < 1e-300 {
                s = trial;
                cur = next;
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
    }
    (cur.plan, MAX_ASCENT_ITERS, false)
}

/// Exact minimizer of the Lagrangian for fixed `s`, the dual value and its
/// gradient `tau (c - b)`.
fn inner(a: &[f64], b: &[f64], cost: &ArrayView2<f64>, params: &UotParams, s: &[f64]) -> Inner {
    let (n, m) = cost.dim();
    let (eps, tau) = (params.epsilon, params.tau);
    let mut plan = Array2::zeros((n, m));
    for i in 0..n {
        let w: Vec<f64> = (0..m).map(|j| -(cost[[i, j]] + tau * s[j]) / eps).collect();
        let mx = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_w = mx + w.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        let t = solve_row_mass(log_w, a[i], eps, tau);
        for j in 0..m {
            plan[[i, j]] = (w[j] - log_w + t).exp();
        }
    }
    let mut dual = 0.0;
    let mut cols = vec![0.0; m];
    for ((i, j), &p) in plan.indexed_iter() {
        cols[j] += p;
        if p > 0.0 {
            dual += cost[[i, j]] * p + eps * p * (p.ln() - 1.0);
        }
    }
    for (i, row) in plan.outer_iter().enumerate() {
        let r: f64 = row.sum();
        dual += tau * (r - a[i]).powi(2);
    }
    let grad: Vec<f64> = cols.iter().zip(b).map(|(c, b)| tau * (c - b)).collect();
    dual += s.iter().zip(&grad).map(|(s, g)| s * g).sum::<f64>();
    Inner { plan, dual, grad }
}

/// Log of the row mass `r` solving `eps log r + 2 tau (r - a) = eps log W`,
/// by bracket expansion and bisection.
fn solve_row_mass(log_w: f64, a: f64, eps: f64, tau: f64) -> f64 {
    let psi = |t: f64| eps * (t - log_w) + 2.0 * tau * (t.exp() - a);
    let guess = if a > 0.0 { log_w.min(a.ln()) } else { log_w };
    let (mut lo, mut hi) = (guess - 1.0, guess + 1.0);
    let mut width = 1.0;
    while psi(lo) > 0.0 {
        width *= 2.0;
        lo -= width;
    }
    width = 1.0;
    while psi(hi) < 0.0 {
        width *= 2.0;
        hi += width;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if psi(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_large_instances() {
        let c = Array2::<f64>::ones((33, 2));
        let r = brute_force_solve(&[0.0; 33], &[1.0, 1.0], &c.view(), &UotParams::default());
        assert!(r.is_err());
    }

    #[test]
    fn zero_tau_matches_closed_form() {
        let c = array![[1.0, 2.0], [1.5, 1.2]];
        let p = UotParams {
            epsilon: 0.3,
            tau: 0.0,
            ..UotParams::default()
        };
        let r = brute_force_solve(&[0.2, 0.4], &[1.0, 1.0], &c.view(), &p).unwrap();
        for ((i, j), &v) in r.plan.values.indexed_iter() {
            let k = (-c[[i, j]] / 0.3f64).exp();
            assert!((v - k).abs() < 1e-6 * k.max(1.0));
        }
    }

    #[test]
    fn row_mass_equation() {
        for &(lw, a) in &[(0.0, 1.0), (-40.0, 0.0), (30.0, 0.0), (2.0, 0.5)] {
            let t = solve_row_mass(lw, a, 0.1, 1.0);
            let resid = 0.1 * (t - lw) + 2.0 * (t.exp() - a);
            assert!(resid.abs() < 1e-10, "{lw} {a}: {resid}");
        }
    }
}

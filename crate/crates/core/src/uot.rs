//! Entropic unbalanced optimal transport with a squared-L2 penalty on the
//! density marginal and an L1 penalty on the annotation marginal.
//!
//! The solver minimizes
//!
//! ```text
//! <C, P> + eps * sum P (log P - 1) + tau * |P 1 - a|_2^2 + tau * |P^T 1 - b|_1
//! ```
//!
//! over non-negative `P` by alternating proximal scaling: the plan is kept in
//! the form `P = diag(u) K diag(v)` with `K = exp(-C / eps)`, and each half
//! step replaces one scaling with the KL-proximal map of its marginal penalty.
//! The row map has no closed form and is solved by a safeguarded Newton
//! iteration; the column map is a three-way clamp.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Terms more than this far below the running maximum of a log-sum-exp are
/// below double precision and are skipped.
const LSE_CUTOFF: f64 = 50.0;
const ROW_PROX_MAX_ITERS: usize = 100;

/// Default entropic weight. Costs are `exp(distance in cells) >= 1`, so with
/// `tau = 1` this leaves most annotations unmatched; density fitting on full
/// grids wants `eps` near 1.
pub const DEFAULT_EPSILON: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UotParams {
    /// Entropic weight, > 0.
    pub epsilon: f64,
    /// Marginal penalty weight, >= 0.
    pub tau: f64,
    pub max_iters: usize,
    /// Stop when the largest change of any log-scaling falls below this.
    pub tolerance: f64,
    /// Run the iteration on log-scalings instead of raw scalings.
    pub stabilize: bool,
}

impl Default for UotParams {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            tau: 1.0,
            max_iters: 10_000,
            tolerance: 1e-9,
            stabilize: true,
        }
    }
}

impl UotParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("tau must be non-negative, got {}", self.tau)));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters must be at least 1"));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(invalid(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        Ok(())
    }
}

/// Non-negative `n x m` transport plan.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub values: Array2<f64>,
}

impl TransportPlan {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            values: Array2::zeros((n, m)),
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.values.sum_axis(Axis(1)).to_vec()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.values.sum_axis(Axis(0)).to_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UotResult {
    /// Primal objective at the returned plan.
    pub loss: f64,
    pub plan: TransportPlan,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    /// Derivative of the loss with respect to the density vector `a`.
    pub grad_density: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Log-scalings `log u`, `log v`; reusable as a warm start for a nearby
/// problem of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Potentials {
    pub log_u: Vec<f64>,
    pub log_v: Vec<f64>,
}

impl Potentials {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            log_u: vec![0.0; n],
            log_v: vec![0.0; m],
        }
    }
}

fn check_inputs(a: &[f64], b: &[f64], cost: &ArrayView2<f64>, params: &UotParams) -> Result<()> {
    params.validate()?;
    let (n, m) = cost.dim();
    if a.len() != n || b.len() != m {
        return Err(invalid(format!(
            "dimension mismatch: a has {}, b has {}, cost is {n}x{m}",
            a.len(),
            b.len()
        )));
    }
    if let Some(v) = a.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(invalid(format!("density must be finite and non-negative, got {v}")));
    }
    if let Some(v) = b.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(invalid(format!("weights must be finite and non-negative, got {v}")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(invalid("cost matrix contains non-finite entries"));
    }
    Ok(())
}

/// Primal objective; `0 log 0` is taken as 0.
pub fn uot_objective(
    plan: &ArrayView2<f64>,
    a: &[f64],
    b: &[f64],
    cost: &ArrayView2<f64>,
    params: &UotParams,
) -> f64 {
    let (n, m) = plan.dim();
    let mut transport = 0.0;
    let mut entropy = 0.0;
    let mut rows = vec![0.0; n];
    let mut cols = vec![0.0; m];
    for ((i, j), &p) in plan.indexed_iter() {
        if p > 0.0 {
            transport += cost[[i, j]] * p;
            entropy += p * (p.ln() - 1.0);
        }
        rows[i] += p;
        cols[j] += p;
    }
    let d1: f64 = rows.iter().zip(a).map(|(r, a)| (r - a) * (r - a)).sum();
    let d2: f64 = cols.iter().zip(b).map(|(c, b)| (c - b).abs()).sum();
    transport + params.epsilon * entropy + params.tau * (d1 + d2)
}

/// `2 tau (a - P 1)`: the derivative of the optimal value with respect to `a`.
/// Only the density-marginal penalty involves `a`, so the envelope theorem
/// gives the gradient from the optimal plan alone.
pub fn loss_gradient_wrt_density(result: &UotResult, a: &[f64], params: &UotParams) -> Result<Vec<f64>> {
    if a.len() != result.row_marginal.len() {
        return Err(invalid(format!(
            "density has {} entries, plan has {} rows",
            a.len(),
            result.row_marginal.len()
        )));
    }
    Ok(a.iter()
        .zip(&result.row_marginal)
        .map(|(a, r)| 2.0 * params.tau * (a - r))
        .collect())
}

/// Solves for `t = log x - log z` where `x` minimizes
/// `eps KL(x | z) + tau (x - a)^2`, i.e. the root of
/// `eps t + 2 tau (z e^t - a)`. Working in the offset keeps rows whose
/// `log z` is huge and negative exact.
pub(crate) fn row_prox(log_z: f64, a: f64, eps: f64, tau: f64, warm: f64) -> f64 {
    if tau == 0.0 {
        return 0.0;
    }
    let hi = 2.0 * tau * a / eps;
    if log_z == f64::NEG_INFINITY {
        return hi;
    }
    let h = |t: f64| eps * t + 2.0 * tau * ((log_z + t).exp() - a);
    // Brackets from 2 tau (x - a) = eps (log z - log x) and the sign of x - a,
    // intersected with 0 <= x, which bounds t by 2 tau a / eps.
    let (lo, hi) = if a > 0.0 {
        let la = a.ln();
        if log_z >= la {
            (la - log_z, ((a + eps * (log_z - la) / (2.0 * tau)).ln() - log_z).min(0.0))
        } else {
            let floor = a - eps * (la - log_z) / (2.0 * tau);
            let lo = if floor > 0.0 { (floor.ln() - log_z).max(0.0) } else { 0.0 };
            (lo, (la - log_z).min(hi))
        }
    } else {
        let hi_s = if log_z > 0.0 {
            log_z.min((eps * log_z / (2.0 * tau)).ln().max(0.0))
        } else {
            log_z
        };
        (-2.0 * tau * hi_s.exp() / eps, hi_s - log_z)
    };
    let (mut lo, mut hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    if lo == hi {
        return lo;
    }
    let mut t = if warm.is_finite() && warm > lo && warm < hi { warm } else { 0.5 * (lo + hi) };
    for _ in 0..ROW_PROX_MAX_ITERS {
        let hv = h(t);
        if hv == 0.0 {
            return t;
        }
        if hv > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let slope = eps + 2.0 * tau * (log_z + t).exp();
        let mut next = t - hv / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - t).abs() <= 1e-15 * t.abs().max(1.0) {
            return next;
        }
        t = next;
    }
    t
}

/// Offset `log x - log z` for `x` minimizing `eps KL(x | z) + tau |x - b|`.
pub(crate) fn col_prox(log_z: f64, b: f64, eps: f64, tau: f64) -> f64 {
    let shift = tau / eps;
    let log_b = if b > 0.0 { b.ln() } else { f64::NEG_INFINITY };
    if log_z - shift > log_b {
        -shift
    } else if log_z + shift < log_b {
        shift
    } else {
        log_b - log_z
    }
}

/// Solves the transport problem from cold scalings.
pub fn solve_uot(a: &[f64], b: &[f64], cost: &ArrayView2<f64>, params: &UotParams) -> Result<UotResult> {
    solve_uot_warm(a, b, cost, params, None).map(|(r, _)| r)
}

/// Solves the transport problem, optionally starting from previous
/// log-scalings, and returns the final log-scalings alongside the result.
pub fn solve_uot_warm(
    a: &[f64],
    b: &[f64],
    cost: &ArrayView2<f64>,
    params: &UotParams,
    warm: Option<&Potentials>,
) -> Result<(UotResult, Potentials)> {
    check_inputs(a, b, cost, params)?;
    let (n, m) = cost.dim();
    let mut pot = match warm {
        Some(p) if p.log_u.len() == n && p.log_v.len() == m => p.clone(),
        Some(_) => return Err(invalid("warm-start potentials have the wrong shape")),
        None => Potentials::zeros(n, m),
    };
    let scaled = cost.mapv(|c| c / params.epsilon);
    let (iterations, converged) = if params.stabilize {
        iterate_log(a, b, &scaled, params, &mut pot)
    } else {
        iterate_plain(a, b, &scaled, params, &mut pot)
    };
    let plan = assemble_plan(&scaled, &pot);
    let result = finish(plan, a, b, cost, params, iterations, converged);
    Ok((result, pot))
}

fn assemble_plan(scaled: &Array2<f64>, pot: &Potentials) -> TransportPlan {
    let mut values = Array2::zeros(scaled.dim());
    for ((i, j), p) in values.indexed_iter_mut() {
        let e = pot.log_u[i] + pot.log_v[j] - scaled[[i, j]];
        *p = if e.is_nan() { 0.0 } else { e.exp() };
    }
    TransportPlan { values }
}

fn finish(
    plan: TransportPlan,
    a: &[f64],
    b: &[f64],
    cost: &ArrayView2<f64>,
    params: &UotParams,
    iterations: usize,
    converged: bool,
) -> UotResult {
    let row_marginal = plan.row_sums();
    let col_marginal = plan.col_sums();
    let loss = uot_objective(&plan.values.view(), a, b, cost, params);
    let grad_density = a
        .iter()
        .zip(&row_marginal)
        .map(|(a, r)| 2.0 * params.tau * (a - r))
        .collect();
    UotResult {
        loss,
        plan,
        row_marginal,
        col_marginal,
        grad_density,
        iterations,
        converged,
    }
}

/// One log-domain sweep: row prox then column prox. Returns the largest
/// change of any log-scaling.
fn sweep_log(a: &[f64], b: &[f64], scaled: &Array2<f64>, params: &UotParams, pot: &mut Potentials, colbuf: &mut ColumnLse) -> f64 {
    let (eps, tau) = (params.epsilon, params.tau);
    let mut delta: f64 = 0.0;
    for (i, row) in scaled.outer_iter().enumerate() {
        let mut mx = f64::NEG_INFINITY;
        for (c, lv) in row.iter().zip(&pot.log_v) {
            mx = mx.max(lv - c);
        }
        let log_z = if mx == f64::NEG_INFINITY {
            mx
        } else {
            let mut s = 0.0;
            for (c, lv) in row.iter().zip(&pot.log_v) {
                let t = lv - c - mx;
                if t > -LSE_CUTOFF {
                    s += t.exp();
                }
            }
            mx + s.ln()
        };
        let new = row_prox(log_z, a[i], eps, tau, pot.log_u[i]);
        delta = delta.max(log_change(pot.log_u[i], new));
        pot.log_u[i] = new;
    }

    colbuf.compute(scaled, &pot.log_u);
    for (j, &bj) in b.iter().enumerate() {
        let log_z = colbuf.lse(j);
        let new = if log_z == f64::NEG_INFINITY { 0.0 } else { col_prox(log_z, bj, eps, tau) };
        delta = delta.max(log_change(pot.log_v[j], new));
        pot.log_v[j] = new;
    }
    delta
}

/// Change in a log potential, relative once it exceeds one in magnitude.
/// Rows that only see clamped costs carry potentials near 1e26 whose
/// rounding jitter alone is far above any absolute tolerance.
fn log_change(old: f64, new: f64) -> f64 {
    if old == new {
        0.0
    } else {
        (new - old).abs() / old.abs().max(new.abs()).max(1.0)
    }
}

/// Column-wise log-sum-exp of `log_u_i - scaled_ij`, computed in two
/// row-major passes.
struct ColumnLse {
    max: Vec<f64>,
    sum: Vec<f64>,
}

impl ColumnLse {
    fn new(m: usize) -> Self {
        Self {
            max: vec![f64::NEG_INFINITY; m],
            sum: vec![0.0; m],
        }
    }

    fn compute(&mut self, scaled: &Array2<f64>, log_u: &[f64]) {
        self.max.fill(f64::NEG_INFINITY);
        self.sum.fill(0.0);
        for (row, lu) in scaled.outer_iter().zip(log_u) {
            for (mx, c) in self.max.iter_mut().zip(row) {
                let t = lu - c;
                if t > *mx {
                    *mx = t;
                }
            }
        }
        for (row, lu) in scaled.outer_iter().zip(log_u) {
            for ((s, mx), c) in self.sum.iter_mut().zip(&self.max).zip(row) {
                let t = lu - c - mx;
                if t > -LSE_CUTOFF {
                    *s += t.exp();
                }
            }
        }
    }

    fn lse(&self, j: usize) -> f64 {
        if self.max[j] == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max[j] + self.sum[j].ln()
        }
    }
}

fn iterate_log(a: &[f64], b: &[f64], scaled: &Array2<f64>, params: &UotParams, pot: &mut Potentials) -> (usize, bool) {
    let mut colbuf = ColumnLse::new(b.len());
    for it in 1..=params.max_iters {
        let delta = sweep_log(a, b, scaled, params, pot, &mut colbuf);
        if !delta.is_finite() {
            return (it, false);
        }
        if delta < params.tolerance {
            return (it, true);
        }
    }
    (params.max_iters, false)
}

/// Scaling iteration on `u`, `v` directly. Faster per sweep but limited to
/// problems whose kernel `exp(-C / eps)` does not underflow.
fn iterate_plain(a: &[f64], b: &[f64], scaled: &Array2<f64>, params: &UotParams, pot: &mut Potentials) -> (usize, bool) {
    let (eps, tau) = (params.epsilon, params.tau);
    let kernel = scaled.mapv(|c| (-c).exp());
    let mut u: Vec<f64> = pot.log_u.iter().map(|l| l.exp()).collect();
    let mut v: Vec<f64> = pot.log_v.iter().map(|l| l.exp()).collect();
    let mut converged = false;
    let mut iters = params.max_iters;
    for it in 1..=params.max_iters {
        let mut delta: f64 = 0.0;
        let kv = kernel.dot(&ndarray::ArrayView1::from(&v));
        for i in 0..u.len() {
            let new = if kv[i] > 0.0 {
                let lz = kv[i].ln();
                row_prox(lz, a[i], eps, tau, u[i].ln()).exp()
            } else {
                0.0
            };
            delta = delta.max(scaling_change(u[i], new));
            u[i] = new;
        }
        let ktu = kernel.t().dot(&ndarray::ArrayView1::from(&u));
        for j in 0..v.len() {
            let new = if ktu[j] > 0.0 {
                let lz = ktu[j].ln();
                col_prox(lz, b[j], eps, tau).exp()
            } else {
                0.0
            };
            delta = delta.max(scaling_change(v[j], new));
            v[j] = new;
        }
        // A scaling dropping to zero (underflowed kernel row) is an infinite
        // change but not a failure; only non-finite scalings are.
        if u.iter().chain(&v).any(|s| !s.is_finite()) {
            iters = it;
            break;
        }
        if delta < params.tolerance {
            iters = it;
            converged = true;
            break;
        }
    }
    pot.log_u = u.iter().map(|s| s.ln()).collect();
    pot.log_v = v.iter().map(|s| s.ln()).collect();
    (iters, converged)
}

fn scaling_change(old: f64, new: f64) -> f64 {
    if old == new {
        0.0
    } else if old > 0.0 && new > 0.0 {
        (new.ln() - old.ln()).abs()
    } else {
        f64::INFINITY
    }
}

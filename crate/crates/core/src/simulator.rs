//! Synthetic scenes, streaked density renders and direct density fitting.
//!
//! Random streams use ChaCha8 (`rand_chacha`) seeded with `seed_from_u64`.
//! Scene placement draws from stream 0 and the render (clutter and noise)
//! from stream 1 of the same seed, so each can be reproduced on its own.

use nalgebra::{Point2, Vector2};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{build_cost_matrix, CostMatrix, CostVariant};
use crate::error::{invalid, Error, Result};
use crate::geometry::{
    build_covariance, camera_distance, closest_camera, validate_cameras, view_ray_angle, Camera,
    DistanceMode, GroundGrid,
};
use crate::localization::{
    add_blob, extract_points_nms, mse_loss, relative_threshold, splat_gaussian, DensityMap, DotMap,
    DEFAULT_NMS_RADIUS, DEFAULT_NMS_REL_THRESHOLD, GAUSSIAN_TRUNCATION,
};
use crate::metrics::{evaluate, MetricsReport, DEFAULT_MATCH_THRESHOLD};
use crate::uot::{solve_uot_warm, Potentials, UotParams};

/// Rejection-sampling budget shared by all placements of one scene.
pub const PLACEMENT_BUDGET: usize = 100_000;
/// Spacing range between neighbours inside a cluster, meters.
pub const CLUSTER_SPACING: (f64, f64) = (0.3, 0.6);
/// Mass range of a spurious clutter blob.
pub const CLUTTER_MASS: (f64, f64) = (0.3, 0.7);
pub const DEFAULT_GAUSSIAN_SIGMA: f64 = 0.3;

const SCENE_STREAM: u64 = 0;
const RENDER_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub grid: GroundGrid,
    pub cameras: Vec<Camera>,
    pub num_people: usize,
    #[serde(default = "default_min_separation")]
    pub min_separation: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cluster_fraction: f64,
}

fn default_min_separation() -> f64 {
    0.5
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        validate_cameras(&self.cameras)?;
        if self.num_people == 0 {
            return Err(invalid("num_people must be at least 1"));
        }
        if !(self.min_separation >= 0.0 && self.min_separation.is_finite()) {
            return Err(invalid(format!(
                "min_separation must be finite and non-negative, got {}",
                self.min_separation
            )));
        }
        if !(0.0..=1.0).contains(&self.cluster_fraction) {
            return Err(invalid(format!(
                "cluster_fraction must lie in [0, 1], got {}",
                self.cluster_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreakParams {
    /// Cross-ray standard deviation, cells.
    pub base_sigma: f64,
    /// Along-ray growth, cells of extra sigma per meter of camera distance,
    /// relative to `base_sigma`.
    pub elongation_per_meter: f64,
    pub noise_std: f64,
    /// Expected number of spurious blobs per scene.
    pub clutter_rate: f64,
}

impl Default for StreakParams {
    fn default() -> Self {
        Self {
            base_sigma: 1.5,
            elongation_per_meter: 0.5,
            noise_std: 0.0,
            clutter_rate: 0.0,
        }
    }
}

impl StreakParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_sigma > 0.0 && self.base_sigma.is_finite()) {
            return Err(invalid(format!("base_sigma must be positive, got {}", self.base_sigma)));
        }
        for (name, v) in [
            ("elongation_per_meter", self.elongation_per_meter),
            ("noise_std", self.noise_std),
            ("clutter_rate", self.clutter_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitInit {
    Uniform,
    StreakedRender,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitParams {
    pub step_size: f64,
    pub iterations: usize,
    pub init: FitInit,
    /// Descend on `z` with density `z^2` instead of projecting onto `a >= 0`.
    pub latent: bool,
    /// Step used with the MSE loss. `None` means `step_size` times the number
    /// of cells, which undoes the `1/n` of the mean.
    pub mse_step_size: Option<f64>,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            iterations: 200,
            init: FitInit::StreakedRender,
            latent: true,
            mse_step_size: None,
        }
    }
}

impl FitParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(invalid(format!("step_size must be positive, got {}", self.step_size)));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations must be at least 1"));
        }
        if let Some(s) = self.mse_step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid(format!("mse_step_size must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Places `num_people` points: a `cluster_fraction` share in groups of two
/// or three at 0.3-0.6 m spacing, the rest uniformly at `min_separation`
/// from everything placed before. Points keep one cell clear of the border.
pub fn sample_scene(spec: &SceneSpec) -> Result<DotMap> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, SCENE_STREAM);
    let g = spec.grid;
    let (w, h) = g.extent();
    let margin = g.cell_size;
    if w <= 2.0 * margin || h <= 2.0 * margin {
        return Err(Error::Capacity("grid too small to place any point".into()));
    }
    let lo = Point2::new(g.origin[0] + margin, g.origin[1] + margin);
    let hi = Point2::new(g.origin[0] + w - margin, g.origin[1] + h - margin);
    let inside = |p: &Point2<f64>| p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y;

    let n_cluster = ((spec.cluster_fraction * spec.num_people as f64).round() as usize).min(spec.num_people);
    let mut sizes = Vec::new();
    let mut left = n_cluster;
    while left > 0 {
        let s = if left <= 3 { left } else { rng.random_range(2..=3) };
        sizes.push(s);
        left -= s;
    }

    let mut points: Vec<Point2<f64>> = Vec::with_capacity(spec.num_people);
    let mut group: Vec<usize> = Vec::with_capacity(spec.num_people);
    let mut attempts = 0usize;
    let mut spend = || {
        attempts += 1;
        if attempts > PLACEMENT_BUDGET {
            Err(Error::Capacity(format!(
                "could not place {} people within {PLACEMENT_BUDGET} attempts",
                spec.num_people
            )))
        } else {
            Ok(())
        }
    };
    let sep = spec.min_separation;
    // `own` is the cluster being filled; singles pass None and keep clear of everyone.
    let far_from_others = |p: &Point2<f64>, points: &[Point2<f64>], group: &[usize], own: Option<usize>| {
        points
            .iter()
            .zip(group)
            .all(|(q, &gq)| Some(gq) == own || (p - q).norm() >= sep)
    };

    for (k, &size) in sizes.iter().enumerate() {
        let start = points.len();
        while points.len() - start < size {
            spend()?;
            let p = if points.len() == start {
                Point2::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y))
            } else {
                let anchor = points[rng.random_range(start..points.len())];
                let r = rng.random_range(CLUSTER_SPACING.0..=CLUSTER_SPACING.1);
                let t = rng.random_range(0.0..std::f64::consts::TAU);
                anchor + Vector2::new(r * t.cos(), r * t.sin())
            };
            let spaced = points[start..]
                .iter()
                .all(|q| (p - q).norm() >= CLUSTER_SPACING.0);
            if inside(&p) && spaced && far_from_others(&p, &points, &group, Some(k)) {
                points.push(p);
                group.push(k);
            }
        }
    }
    let single = sizes.len();
    while points.len() < spec.num_people {
        spend()?;
        let p = Point2::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y));
        if far_from_others(&p, &points, &group, None) {
            points.push(p);
            group.push(single);
        }
    }
    Ok(DotMap::new(points))
}

/// Renders each point as a unit-mass anisotropic Gaussian stretched along the
/// view ray of its closest camera, then adds clutter blobs and clipped
/// Gaussian noise drawn from `seed`.
pub fn render_streaked_density(
    dots: &DotMap,
    cameras: &[Camera],
    grid: &GroundGrid,
    params: &StreakParams,
    seed: u64,
) -> Result<DensityMap> {
    params.validate()?;
    grid.validate()?;
    if cameras.is_empty() {
        return Err(invalid("streaked render needs at least one camera"));
    }
    validate_cameras(cameras)?;
    dots.check_within(grid)?;
    let mut map = DensityMap::zeros(*grid);
    let base = params.base_sigma;
    for p in &dots.points {
        let k = closest_camera(cameras, p, DistanceMode::Full3d)?;
        let d_cam = camera_distance(&cameras[k], p, DistanceMode::Full3d);
        let along = base * (1.0 + params.elongation_per_meter * d_cam);
        let cov = match view_ray_angle(&cameras[k], p) {
            Ok(beta) => build_covariance(beta, along * along, base * base)?,
            Err(Error::DegenerateRay) => build_covariance(0.0, base * base, base * base)?,
            Err(e) => return Err(e),
        };
        let center = grid.world_to_units(p);
        add_blob(
            &mut map.values,
            &center,
            |dx, dy| cov.quadratic_form(&Vector2::new(dx, dy)),
            GAUSSIAN_TRUNCATION * along,
            1.0,
        );
    }

    let mut rng = scene_rng(seed, RENDER_STREAM);
    if params.clutter_rate > 0.0 {
        let poisson = Poisson::new(params.clutter_rate)
            .map_err(|e| invalid(format!("clutter rate: {e}")))?;
        let count = poisson.sample(&mut rng) as usize;
        let (rows, cols) = (grid.rows as f64, grid.cols as f64);
        for _ in 0..count {
            let center = Point2::new(rng.random_range(0.0..cols), rng.random_range(0.0..rows));
            let mass = rng.random_range(CLUTTER_MASS.0..=CLUTTER_MASS.1);
            add_blob(
                &mut map.values,
                &center,
                |dx, dy| (dx * dx + dy * dy) / (base * base),
                GAUSSIAN_TRUNCATION * base,
                mass,
            );
        }
    }
    if params.noise_std > 0.0 {
        let normal = Normal::new(0.0, params.noise_std).map_err(|e| invalid(format!("noise: {e}")))?;
        for v in map.values.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).max(0.0);
        }
    }
    Ok(map)
}

/// Mass `m / n` in every cell.
pub fn uniform_density(grid: &GroundGrid, mass: f64) -> DensityMap {
    DensityMap {
        grid: *grid,
        values: Array2::from_elem((grid.rows, grid.cols), mass / grid.len() as f64),
    }
}

/// What the fitted density is compared against.
#[derive(Debug, Clone, Copy)]
pub enum FitTarget<'a> {
    Uot { cost: &'a CostMatrix, params: &'a UotParams },
    Mse { target: &'a DensityMap },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub density: DensityMap,
    /// Loss before each step, then at the returned density.
    pub loss_trace: Vec<f64>,
    /// Scaling iterations of the final transport solve (0 for MSE).
    pub iterations: usize,
    pub converged: bool,
}

impl FitOutcome {
    pub fn loss_final(&self) -> f64 {
        *self.loss_trace.last().expect("trace is never empty")
    }
}

/// Gradient descent on the density map itself. UOT solves are warm-started
/// from the previous step's scalings.
pub fn fit_density(gt: &DotMap, target: FitTarget<'_>, fit: &FitParams, init: &DensityMap) -> Result<FitOutcome> {
    fit.validate()?;
    let grid = init.grid;
    let n = grid.len();
    let b = gt.weights();
    match target {
        FitTarget::Uot { cost, params } => {
            params.validate()?;
            if cost.n() != n || cost.m() != gt.len() {
                return Err(invalid(format!(
                    "cost matrix is {}x{}, expected {n}x{}",
                    cost.n(),
                    cost.m(),
                    gt.len()
                )));
            }
        }
        FitTarget::Mse { target } => {
            if target.grid != grid {
                return Err(invalid("MSE target grid differs from the initial density grid"));
            }
        }
    }
    let step = match target {
        FitTarget::Mse { .. } => fit.mse_step_size.unwrap_or(fit.step_size * n as f64),
        FitTarget::Uot { .. } => fit.step_size,
    };

    let mut a = init.to_flat();
    let mut z: Vec<f64> = a.iter().map(|v| v.sqrt()).collect();
    let mut warm: Option<Potentials> = None;
    let mut trace = Vec::with_capacity(fit.iterations + 1);
    let mut last = (0usize, true);

    let evaluate_at = |a: &[f64], warm: &mut Option<Potentials>| -> Result<(f64, Vec<f64>, usize, bool)> {
        match target {
            FitTarget::Uot { cost, params } => {
                let (r, pot) = solve_uot_warm(a, &b, &cost.values.view(), params, warm.as_ref())?;
                *warm = Some(pot);
                Ok((r.loss, r.grad_density, r.iterations, r.converged))
            }
            FitTarget::Mse { target } => {
                let pred = DensityMap::from_flat(grid, a.to_vec())?;
                let (loss, grad) = mse_loss(&pred, target)?;
                Ok((loss, grad.iter().copied().collect(), 0, true))
            }
        }
    };

    for it in 0..=fit.iterations {
        let (loss, grad, iters, conv) = evaluate_at(&a, &mut warm)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical {
                iteration: it,
                message: format!("loss became {loss}"),
            });
        }
        trace.push(loss);
        last = (iters, conv);
        if it == fit.iterations {
            break;
        }
        if fit.latent {
            for ((zi, ai), g) in z.iter_mut().zip(a.iter_mut()).zip(&grad) {
                if *g != 0.0 {
                    *zi -= step * 2.0 * *zi * g;
                    *ai = *zi * *zi;
                }
            }
        } else {
            for (ai, g) in a.iter_mut().zip(&grad) {
                *ai = (*ai - step * g).max(0.0);
            }
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                iteration: it + 1,
                message: "density became non-finite".into(),
            });
        }
    }
    Ok(FitOutcome {
        density: DensityMap::from_flat(grid, a)?,
        loss_trace: trace,
        iterations: last.0,
        converged: last.1,
    })
}

/// A loss compared by [`run_comparison`].
#[derive(Debug, Clone, PartialEq)]
pub enum LossVariant {
    Mse,
    Uot(CostVariant),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVariant {
    pub label: String,
    pub loss: LossVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalParams {
    /// Matching distance, meters.
    pub threshold: f64,
    /// NMS threshold as a fraction of the map maximum.
    pub nms_rel_threshold: f64,
    pub nms_radius: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_MATCH_THRESHOLD,
            nms_rel_threshold: DEFAULT_NMS_REL_THRESHOLD,
            nms_radius: DEFAULT_NMS_RADIUS,
        }
    }
}

impl EvalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(invalid(format!("threshold must be positive, got {}", self.threshold)));
        }
        if !(self.nms_rel_threshold > 0.0 && self.nms_rel_threshold <= 1.0) {
            return Err(invalid(format!(
                "nms_rel_threshold must lie in (0, 1], got {}",
                self.nms_rel_threshold
            )));
        }
        if self.nms_radius == 0 {
            return Err(invalid("nms_radius must be at least 1"));
        }
        Ok(())
    }
}

/// Everything a comparison run needs besides the variant list.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonSetup {
    pub scene: SceneSpec,
    pub streaks: StreakParams,
    pub uot: UotParams,
    pub fit: FitParams,
    pub eval: EvalParams,
    /// Kernel width of the MSE target, meters.
    pub gaussian_sigma: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub variant: String,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub loss_final: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub variant: String,
    pub trials: usize,
    pub mean: MetricsReport,
    pub std: MetricsReport,
    pub loss_final_mean: f64,
    pub converged_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    /// Variant-major, then by seed.
    pub rows: Vec<ComparisonRow>,
    pub aggregates: Vec<AggregateRow>,
    /// Fitted density per variant for the first seed.
    pub first_seed_maps: Vec<(String, DensityMap)>,
}

impl ComparisonTable {
    pub fn aggregate(&self, label: &str) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.variant == label)
    }
}

/// Result of one trial under one variant, kept with its fitted map.
struct TrialRun {
    row: ComparisonRow,
    density: DensityMap,
}

/// For each trial seed `scene.seed + t`: sample a scene, render the streaked
/// density, fit it under every variant, extract points and score them.
pub fn run_comparison(setup: &ComparisonSetup, variants: &[LabeledVariant]) -> Result<ComparisonTable> {
    setup.scene.validate()?;
    setup.streaks.validate()?;
    setup.uot.validate()?;
    setup.fit.validate()?;
    setup.eval.validate()?;
    if setup.trials == 0 {
        return Err(invalid("trials must be at least 1"));
    }
    if variants.is_empty() {
        return Err(invalid("at least one variant is required"));
    }
    let seeds: Vec<u64> = (0..setup.trials as u64)
        .map(|t| setup.scene.seed.wrapping_add(t))
        .collect();
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs: Vec<TrialRun> = jobs
        .par_iter()
        .map(|&(v, seed)| run_trial(setup, &variants[v], seed))
        .collect::<Result<_>>()?;

    let mut aggregates = Vec::with_capacity(variants.len());
    let mut first_seed_maps = Vec::with_capacity(variants.len());
    for (v, chunk) in runs.chunks(seeds.len()).enumerate() {
        aggregates.push(aggregate(&variants[v].label, chunk.iter().map(|r| &r.row)));
        first_seed_maps.push((variants[v].label.clone(), chunk[0].density.clone()));
    }
    Ok(ComparisonTable {
        rows: runs.into_iter().map(|r| r.row).collect(),
        aggregates,
        first_seed_maps,
    })
}

/// Scene, streaked render and fit initialization for one trial seed.
pub fn trial_inputs(setup: &ComparisonSetup, seed: u64) -> Result<(DotMap, DensityMap)> {
    let spec = SceneSpec {
        seed,
        ..setup.scene.clone()
    };
    let gt = sample_scene(&spec)?;
    let render = render_streaked_density(&gt, &spec.cameras, &spec.grid, &setup.streaks, seed)?;
    Ok((gt, render))
}

fn run_trial(setup: &ComparisonSetup, variant: &LabeledVariant, seed: u64) -> Result<TrialRun> {
    let (gt, render) = trial_inputs(setup, seed)?;
    let grid = setup.scene.grid;
    let init = match setup.fit.init {
        FitInit::StreakedRender => render,
        FitInit::Uniform => uniform_density(&grid, gt.len() as f64),
    };
    let outcome = match &variant.loss {
        LossVariant::Mse => {
            let target = splat_gaussian(&gt, &grid, setup.gaussian_sigma)?;
            fit_density(&gt, FitTarget::Mse { target: &target }, &setup.fit, &init)?
        }
        LossVariant::Uot(cv) => {
            let cost = build_cost_matrix(&grid, &gt, &setup.scene.cameras, cv)?;
            let target = FitTarget::Uot {
                cost: &cost,
                params: &setup.uot,
            };
            fit_density(&gt, target, &setup.fit, &init)?
        }
    };
    let threshold = relative_threshold(&outcome.density, setup.eval.nms_rel_threshold);
    let pred = extract_points_nms(&outcome.density, threshold, setup.eval.nms_radius);
    let (_, metrics) = evaluate(&pred, &gt, setup.eval.threshold)?;
    Ok(TrialRun {
        row: ComparisonRow {
            variant: variant.label.clone(),
            seed,
            metrics,
            loss_final: outcome.loss_final(),
            iterations: outcome.iterations,
            converged: outcome.converged,
        },
        density: outcome.density,
    })
}

fn aggregate<'a>(label: &str, rows: impl Iterator<Item = &'a ComparisonRow>) -> AggregateRow {
    let rows: Vec<&ComparisonRow> = rows.collect();
    let k = rows.len() as f64;
    let field = |f: fn(&MetricsReport) -> f64| -> (f64, f64) {
        let mean = rows.iter().map(|r| f(&r.metrics)).sum::<f64>() / k;
        let var = rows.iter().map(|r| (f(&r.metrics) - mean).powi(2)).sum::<f64>() / k;
        (mean, var.sqrt())
    };
    let (moda, moda_s) = field(|m| m.moda);
    let (modp, modp_s) = field(|m| m.modp);
    let (precision, precision_s) = field(|m| m.precision);
    let (recall, recall_s) = field(|m| m.recall);
    let (f1, f1_s) = field(|m| m.f1);
    AggregateRow {
        variant: label.to_string(),
        trials: rows.len(),
        mean: MetricsReport {
            moda,
            modp,
            precision,
            recall,
            f1,
        },
        std: MetricsReport {
            moda: moda_s,
            modp: modp_s,
            precision: precision_s,
            recall: recall_s,
            f1: f1_s,
        },
        loss_final_mean: rows.iter().map(|r| r.loss_final).sum::<f64>() / k,
        converged_count: rows.iter().filter(|r| r.converged).count(),
    }
}

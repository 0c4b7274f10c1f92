//! Transport cost matrices for the Euclidean, view-ray, distance-adjusted and
//! Mahalanobis cost families, composed over cameras by closest-camera
//! selection.

use nalgebra::{Point2, Vector2};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{
    build_covariance, camera_distance, closest_camera, min_max_normalize, validate_cameras,
    view_ray_angle, Camera, CovarianceSpec, DistanceMode, GroundGrid,
};
use crate::localization::DotMap;

/// Distances are clamped here before exponentiation so that `exp` stays finite.
pub const MAX_COST_EXPONENT: f64 = 60.0;
pub const DEFAULT_SIGMA2_SQ: f64 = 1.2;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    /// Isotropic distance, no camera dependence.
    Euclidean,
    /// Fixed anisotropy aligned with the view ray.
    ViewRay,
    /// Isotropic, shrunk with normalized camera distance.
    DistanceAdjusted,
    /// View-ray anisotropy whose cross-ray variance grows with camera distance.
    Mahalanobis,
}

impl CostKind {
    pub fn needs_cameras(self) -> bool {
        !matches!(self, CostKind::Euclidean)
    }

    /// Short name of the multi-view loss built from this kind.
    pub fn loss_name(self) -> &'static str {
        match self {
            CostKind::Euclidean => "e-mvot",
            CostKind::ViewRay => "mv-mvot",
            CostKind::DistanceAdjusted => "ed-mvot",
            CostKind::Mahalanobis => "m-mvot",
        }
    }

    pub fn from_loss_name(name: &str) -> Option<Self> {
        match name {
            "e-mvot" | "e-ot" => Some(CostKind::Euclidean),
            "mv-mvot" | "mv-ot" => Some(CostKind::ViewRay),
            "ed-mvot" | "ed-ot" => Some(CostKind::DistanceAdjusted),
            "m-mvot" | "m-ot" => Some(CostKind::Mahalanobis),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostVariant {
    pub kind: CostKind,
    /// Cross-ray variance used by [`CostKind::ViewRay`].
    pub sigma2_sq_fixed: f64,
    /// Distance-adaptivity factor for the distance-aware kinds.
    pub alpha: f64,
    pub distance_mode: DistanceMode,
}

impl CostVariant {
    pub fn new(kind: CostKind) -> Self {
        Self {
            kind,
            sigma2_sq_fixed: DEFAULT_SIGMA2_SQ,
            alpha: DEFAULT_ALPHA,
            distance_mode: DistanceMode::Full3d,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_sigma2_sq(mut self, sigma2_sq: f64) -> Self {
        self.sigma2_sq_fixed = sigma2_sq;
        self
    }

    pub fn with_distance_mode(mut self, mode: DistanceMode) -> Self {
        self.distance_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2_sq_fixed >= 1.0 && self.sigma2_sq_fixed.is_finite()) {
            return Err(invalid(format!(
                "sigma2_sq must be finite and >= 1, got {}",
                self.sigma2_sq_fixed
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Provenance of one cost column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnMeta {
    /// Id of the selected camera; `None` when the frame has no cameras.
    pub camera_id: Option<usize>,
    pub beta: f64,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    /// Distance to the selected camera in meters.
    pub d_cam: Option<f64>,
    pub d_norm: f64,
    /// The annotation sits under its camera; covariance forced isotropic.
    pub degenerate_ray: bool,
}

/// Dense `n x m` cost matrix, rows indexed by grid cell (row-major), columns by
/// annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub values: Array2<f64>,
    pub column_meta: Vec<ColumnMeta>,
}

impl CostMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn m(&self) -> usize {
        self.values.ncols()
    }
}

fn clamped_exp(distance: f64) -> f64 {
    distance.min(MAX_COST_EXPONENT).exp()
}

/// `exp(|x - y|)`, both points in grid units.
pub fn euclidean_cost(x: &Point2<f64>, y: &Point2<f64>) -> f64 {
    let d = x - y;
    clamped_exp((d.x * d.x + d.y * d.y).sqrt())
}

/// `exp(sqrt((x - y)^T S^-1 (x - y)))`, both points in grid units.
pub fn mahalanobis_cost(x: &Point2<f64>, y: &Point2<f64>, cov: &CovarianceSpec) -> f64 {
    let d: Vector2<f64> = x - y;
    clamped_exp(cov.quadratic_form(&d).max(0.0).sqrt())
}

/// Along-ray and cross-ray variances for a point with normalized camera
/// distance `d_norm`.
pub fn variances_for_point(variant: &CostVariant, d_norm: f64) -> (f64, f64) {
    debug_assert!((0.0..=1.0).contains(&d_norm));
    let d_norm = d_norm.clamp(0.0, 1.0);
    match variant.kind {
        CostKind::Euclidean => (1.0, 1.0),
        CostKind::ViewRay => (1.0, variant.sigma2_sq_fixed),
        CostKind::DistanceAdjusted => {
            let s = 1.0 / (variant.alpha * d_norm).exp();
            (s, s)
        }
        CostKind::Mahalanobis => (1.0, (variant.alpha * d_norm).exp()),
    }
}

/// Per-annotation geometry: selected camera, ray angle, distance, normalized
/// distance, variances and covariance.
pub fn column_geometry(
    grid: &GroundGrid,
    gt: &DotMap,
    cameras: &[Camera],
    variant: &CostVariant,
) -> Result<Vec<(ColumnMeta, CovarianceSpec)>> {
    variant.validate()?;
    if gt.is_empty() {
        return Err(invalid("cost matrix needs at least one ground-truth point"));
    }
    if variant.kind.needs_cameras() && cameras.is_empty() {
        return Err(invalid(format!(
            "{} cost needs at least one camera",
            variant.kind.loss_name()
        )));
    }
    validate_cameras(cameras)?;
    grid.validate()?;

    let mut selected = Vec::with_capacity(gt.len());
    for y in &gt.points {
        if cameras.is_empty() {
            selected.push(None);
            continue;
        }
        let k = closest_camera(cameras, y, variant.distance_mode)?;
        let d = camera_distance(&cameras[k], y, variant.distance_mode);
        selected.push(Some((k, d)));
    }
    let d_norm = if cameras.is_empty() {
        vec![0.0; gt.len()]
    } else {
        let ds: Vec<f64> = selected.iter().map(|s| s.map_or(0.0, |(_, d)| d)).collect();
        min_max_normalize(&ds)?
    };

    gt.points
        .iter()
        .zip(selected)
        .zip(d_norm)
        .map(|((y, sel), dn)| {
            let (beta, degenerate) = match sel {
                Some((k, _)) => match view_ray_angle(&cameras[k], y) {
                    Ok(b) => (b, false),
                    Err(Error::DegenerateRay) => (0.0, true),
                    Err(e) => return Err(e),
                },
                None => (0.0, false),
            };
            let (s1, s2) = if degenerate {
                (1.0, 1.0)
            } else {
                variances_for_point(variant, dn)
            };
            let cov = build_covariance(beta, s1, s2)?;
            let meta = ColumnMeta {
                camera_id: sel.map(|(k, _)| cameras[k].id),
                beta,
                sigma1_sq: s1,
                sigma2_sq: s2,
                d_cam: sel.map(|(_, d)| d),
                d_norm: dn,
                degenerate_ray: degenerate,
            };
            Ok((meta, cov))
        })
        .collect()
}

/// Builds the full cost matrix between every grid cell center and every
/// annotation, using each annotation's closest camera.
pub fn build_cost_matrix(
    grid: &GroundGrid,
    gt: &DotMap,
    cameras: &[Camera],
    variant: &CostVariant,
) -> Result<CostMatrix> {
    let geometry = column_geometry(grid, gt, cameras, variant)?;
    let n = grid.len();
    let m = gt.len();
    let columns: Vec<Vec<f64>> = geometry
        .par_iter()
        .zip(gt.points.par_iter())
        .map(|((_, cov), y)| {
            let yu = grid.world_to_units(y);
            (0..n)
                .map(|i| {
                    let x = grid.cell_center_units(i);
                    if variant.kind == CostKind::Euclidean {
                        euclidean_cost(&x, &yu)
                    } else {
                        mahalanobis_cost(&x, &yu, cov)
                    }
                })
                .collect()
        })
        .collect();
    let mut values = Array2::zeros((n, m));
    for (j, col) in columns.into_iter().enumerate() {
        for (i, c) in col.into_iter().enumerate() {
            values[[i, j]] = c;
        }
    }
    Ok(CostMatrix {
        values,
        column_meta: geometry.into_iter().map(|(meta, _)| meta).collect(),
    })
}

//! Density maps, dot maps, peak extraction and the Gaussian/MSE baseline.

use nalgebra::Point2;
use ndarray::Array2;

use crate::error::{invalid, Result};
use crate::geometry::GroundGrid;

/// Default NMS threshold as a fraction of the map maximum.
pub const DEFAULT_NMS_REL_THRESHOLD: f64 = 0.3;
/// Lower bound applied to the relative NMS threshold.
pub const NMS_THRESHOLD_FLOOR: f64 = 1e-4;
pub const DEFAULT_NMS_RADIUS: usize = 3;
/// Gaussian kernels are truncated at this many standard deviations.
pub const GAUSSIAN_TRUNCATION: f64 = 4.0;

/// Predicted density values at the cell centers of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub grid: GroundGrid,
    /// `rows x cols`, row-major.
    pub values: Array2<f64>,
}

impl DensityMap {
    pub fn zeros(grid: GroundGrid) -> Self {
        Self {
            grid,
            values: Array2::zeros((grid.rows, grid.cols)),
        }
    }

    pub fn from_values(grid: GroundGrid, values: Array2<f64>) -> Result<Self> {
        if values.dim() != (grid.rows, grid.cols) {
            return Err(invalid(format!(
                "density shape {:?} does not match {}x{} grid",
                values.dim(),
                grid.rows,
                grid.cols
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(format!(
                "density values must be finite and non-negative, got {v}"
            )));
        }
        Ok(Self { grid, values })
    }

    /// Builds a map from a flat row-major vector.
    pub fn from_flat(grid: GroundGrid, flat: Vec<f64>) -> Result<Self> {
        let values = Array2::from_shape_vec((grid.rows, grid.cols), flat)
            .map_err(|e| invalid(format!("density length mismatch: {e}")))?;
        Self::from_values(grid, values)
    }

    /// Row-major flat copy of the values, the `a` vector of the transport problem.
    pub fn to_flat(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.values.sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Ground-truth (or detected) person positions in world meters, each with
/// unit weight.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DotMap {
    pub points: Vec<Point2<f64>>,
}

impl DotMap {
    pub fn new(points: Vec<Point2<f64>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The weight vector `b`, all ones.
    pub fn weights(&self) -> Vec<f64> {
        vec![1.0; self.points.len()]
    }

    pub fn check_within(&self, grid: &GroundGrid) -> Result<()> {
        match self.points.iter().position(|p| !grid.contains(p)) {
            Some(j) => Err(invalid(format!(
                "point {j} at ({}, {}) lies outside the grid",
                self.points[j].x, self.points[j].y
            ))),
            None => Ok(()),
        }
    }
}

/// NMS threshold derived from a map: a fraction of its maximum, floored.
pub fn relative_threshold(density: &DensityMap, fraction: f64) -> f64 {
    (fraction * density.max()).max(NMS_THRESHOLD_FLOOR)
}

/// Extracts cell centers that are local maxima of the density within a
/// `(2 radius + 1)^2` window and reach `threshold`.
///
/// A cell survives only if every other cell in its window is strictly smaller,
/// except equal-valued cells that come later in row-major order; plateaus
/// therefore keep their first cell.
pub fn extract_points_nms(density: &DensityMap, threshold: f64, radius: usize) -> DotMap {
    let (rows, cols) = density.values.dim();
    let v = &density.values;
    let mut points = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let center = v[[r, c]];
            if center.is_nan() || center < threshold {
                continue;
            }
            let r0 = r.saturating_sub(radius);
            let r1 = (r + radius).min(rows - 1);
            let c0 = c.saturating_sub(radius);
            let c1 = (c + radius).min(cols - 1);
            let mut is_max = true;
            'window: for rr in r0..=r1 {
                for cc in c0..=c1 {
                    if (rr, cc) == (r, c) {
                        continue;
                    }
                    let other = v[[rr, cc]];
                    let earlier = (rr, cc) < (r, c);
                    if other > center || (other == center && earlier) {
                        is_max = false;
                        break 'window;
                    }
                }
            }
            if is_max {
                // in range by construction
                points.push(density.grid.cell_to_world(r, c).unwrap());
            }
        }
    }
    DotMap::new(points)
}

/// Sum of per-point isotropic Gaussians (`sigma` in meters) evaluated at cell
/// centers, truncated at four standard deviations, each renormalized to unit
/// discrete mass.
pub fn splat_gaussian(dots: &DotMap, grid: &GroundGrid, sigma: f64) -> Result<DensityMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("gaussian sigma must be positive, got {sigma}")));
    }
    dots.check_within(grid)?;
    let sigma_units = sigma / grid.cell_size;
    let mut map = DensityMap::zeros(*grid);
    for p in &dots.points {
        let center = grid.world_to_units(p);
        add_blob(
            &mut map.values,
            &center,
            |dx, dy| (dx * dx + dy * dy) / (sigma_units * sigma_units),
            GAUSSIAN_TRUNCATION * sigma_units,
            1.0,
        );
    }
    Ok(map)
}

/// Adds a blob `exp(-q/2)` of total discrete mass `mass`, where `q(dx, dy)`
/// is a squared Mahalanobis radius in grid units; cells with `q > 16` are
/// skipped. `reach` bounds the window scanned around `center`.
pub(crate) fn add_blob(
    values: &mut Array2<f64>,
    center: &Point2<f64>,
    q: impl Fn(f64, f64) -> f64,
    reach: f64,
    mass: f64,
) {
    let (rows, cols) = values.dim();
    let cut = GAUSSIAN_TRUNCATION * GAUSSIAN_TRUNCATION;
    let r0 = ((center.y - reach - 0.5).floor().max(0.0)) as usize;
    let r1 = ((center.y + reach - 0.5).ceil().max(0.0) as usize).min(rows - 1);
    let c0 = ((center.x - reach - 0.5).floor().max(0.0)) as usize;
    let c1 = ((center.x + reach - 0.5).ceil().max(0.0) as usize).min(cols - 1);
    let mut cells = Vec::new();
    let mut total = 0.0;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let dx = c as f64 + 0.5 - center.x;
            let dy = r as f64 + 0.5 - center.y;
            let qv = q(dx, dy);
            if qv <= cut {
                let w = (-0.5 * qv).exp();
                total += w;
                cells.push((r, c, w));
            }
        }
    }
    if total > 0.0 {
        for (r, c, w) in cells {
            values[[r, c]] += mass * w / total;
        }
    } else {
        // Kernel narrower than a cell: put the mass on the nearest cell.
        let r = (center.y.floor().max(0.0) as usize).min(rows - 1);
        let c = (center.x.floor().max(0.0) as usize).min(cols - 1);
        values[[r, c]] += mass;
    }
}

/// Mean squared error over cells and its gradient with respect to `pred`.
pub fn mse_loss(pred: &DensityMap, target: &DensityMap) -> Result<(f64, Array2<f64>)> {
    if pred.grid != target.grid {
        return Err(invalid("mse_loss: prediction and target grids differ"));
    }
    let n = pred.grid.len() as f64;
    let diff = &pred.values - &target.values;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.mapv(|d| 2.0 * d / n);
    Ok((loss, grad))
}

//! Ground-plane geometry: the grid, cameras, view-ray frames and the
//! anisotropic covariances built from them.
//!
//! World coordinates are meters. Cost-side geometry (cell centers, annotation
//! positions, covariances) is expressed in grid cells, so a variance of 1
//! corresponds to one cell. Camera distances stay in meters.

use nalgebra::{Matrix2, Point2, Point3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Minimum planar separation (meters) between a point and a camera's ground
/// projection for a view ray to be defined.
pub const DEGENERATE_RAY_EPS: f64 = 1e-9;

/// A rectangular ground-plane grid of square cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundGrid {
    pub rows: usize,
    pub cols: usize,
    /// Cell edge length in meters.
    #[serde(default = "default_cell_size")]
    pub cell_size: f64,
    /// World position (meters) of the grid corner at row 0, col 0.
    #[serde(default)]
    pub origin: [f64; 2],
}

pub const DEFAULT_CELL_SIZE: f64 = 0.1;

fn default_cell_size() -> f64 {
    DEFAULT_CELL_SIZE
}

impl GroundGrid {
    pub fn new(rows: usize, cols: usize, cell_size: f64, origin: [f64; 2]) -> Result<Self> {
        let grid = Self {
            rows,
            cols,
            cell_size,
            origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(invalid(format!(
                "grid must have at least one row and column, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(invalid(format!(
                "cell size must be positive, got {}",
                self.cell_size
            )));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(invalid("grid origin must be finite"));
        }
        Ok(())
    }

    /// Number of cells, `rows * cols`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// World-space center of cell `(row, col)`.
    pub fn cell_to_world(&self, row: usize, col: usize) -> Result<Point2<f64>> {
        if row >= self.rows || col >= self.cols {
            return Err(Error::IndexOutOfRange {
                row,
                col,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(Point2::new(
            self.origin[0] + (col as f64 + 0.5) * self.cell_size,
            self.origin[1] + (row as f64 + 0.5) * self.cell_size,
        ))
    }

    /// Center of the cell with row-major index `idx`, in grid units.
    pub fn cell_center_units(&self, idx: usize) -> Point2<f64> {
        let (row, col) = (idx / self.cols, idx % self.cols);
        Point2::new(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Converts a world point (meters) to grid units relative to the origin.
    pub fn world_to_units(&self, p: &Point2<f64>) -> Point2<f64> {
        Point2::new(
            (p.x - self.origin[0]) / self.cell_size,
            (p.y - self.origin[1]) / self.cell_size,
        )
    }

    /// Converts grid units back to world meters.
    pub fn units_to_world(&self, p: &Point2<f64>) -> Point2<f64> {
        Point2::new(
            self.origin[0] + p.x * self.cell_size,
            self.origin[1] + p.y * self.cell_size,
        )
    }

    /// Whether a world point lies inside the grid's extent (edges inclusive).
    pub fn contains(&self, p: &Point2<f64>) -> bool {
        let u = self.world_to_units(p);
        u.x >= 0.0 && u.y >= 0.0 && u.x <= self.cols as f64 && u.y <= self.rows as f64
    }

    /// Row-major index of the cell containing a world point, if inside.
    pub fn cell_of(&self, p: &Point2<f64>) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let u = self.world_to_units(p);
        let col = (u.x.floor() as usize).min(self.cols - 1);
        let row = (u.y.floor() as usize).min(self.rows - 1);
        Some(row * self.cols + col)
    }

    /// World-space extent `(width, height)` in meters.
    pub fn extent(&self) -> (f64, f64) {
        (
            self.cols as f64 * self.cell_size,
            self.rows as f64 * self.cell_size,
        )
    }
}

/// A calibrated camera reduced to its 3D position in world meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub id: usize,
    /// `[x, y, height]` in meters.
    pub position: [f64; 3],
}

impl Camera {
    pub fn new(id: usize, x: f64, y: f64, height: f64) -> Self {
        Self {
            id,
            position: [x, y, height],
        }
    }

    pub fn ground(&self) -> Point2<f64> {
        Point2::new(self.position[0], self.position[1])
    }

    pub fn point3(&self) -> Point3<f64> {
        Point3::from(self.position)
    }

    pub fn height(&self) -> f64 {
        self.position[2]
    }
}

/// Checks camera-list invariants: non-negative heights, finite positions,
/// unique ids.
pub fn validate_cameras(cameras: &[Camera]) -> Result<()> {
    for (i, cam) in cameras.iter().enumerate() {
        if !cam.position.iter().all(|v| v.is_finite()) {
            return Err(invalid(format!("camera {} has a non-finite position", cam.id)));
        }
        if cam.height() < 0.0 {
            return Err(invalid(format!("camera {} has negative height", cam.id)));
        }
        if cameras[..i].iter().any(|c| c.id == cam.id) {
            return Err(invalid(format!("duplicate camera id {}", cam.id)));
        }
    }
    Ok(())
}

/// How the object-to-camera distance is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    /// Planar distance to the camera's ground projection.
    Ground2d,
    /// Euclidean distance to the 3D camera center, point at height 0.
    #[default]
    Full3d,
}

/// Rotation from world axes into the view-ray frame. The first column is the
/// unit view-ray direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewRayFrame {
    pub beta: f64,
    pub rotation: Matrix2<f64>,
}

impl ViewRayFrame {
    pub fn new(beta: f64) -> Self {
        let (s, c) = beta.sin_cos();
        Self {
            beta,
            rotation: Matrix2::new(c, -s, s, c),
        }
    }

    /// Unit vector along the view ray.
    pub fn along(&self) -> Vector2<f64> {
        self.rotation.column(0).into_owned()
    }

    /// Unit vector perpendicular to the view ray.
    pub fn across(&self) -> Vector2<f64> {
        self.rotation.column(1).into_owned()
    }
}

/// Planar angle of the ray from the camera's ground projection to `point`,
/// in `(-pi, pi]`.
pub fn view_ray_angle(camera: &Camera, point: &Point2<f64>) -> Result<f64> {
    let d = point - camera.ground();
    if d.norm() <= DEGENERATE_RAY_EPS {
        return Err(Error::DegenerateRay);
    }
    let beta = d.y.atan2(d.x);
    // atan2(-0.0, x < 0) yields -pi; fold it onto the closed end.
    Ok(if beta <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        beta
    })
}

pub fn camera_distance(camera: &Camera, point: &Point2<f64>, mode: DistanceMode) -> f64 {
    match mode {
        DistanceMode::Ground2d => (point - camera.ground()).norm(),
        DistanceMode::Full3d => (Point3::new(point.x, point.y, 0.0) - camera.point3()).norm(),
    }
}

/// Rescales non-negative distances onto `[0, 1]`. An all-equal input maps to
/// all zeros.
pub fn min_max_normalize(distances: &[f64]) -> Result<Vec<f64>> {
    if distances.is_empty() {
        return Err(invalid("cannot normalize an empty distance list"));
    }
    if let Some(bad) = distances.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(invalid(format!(
            "distances must be finite and non-negative, got {bad}"
        )));
    }
    let lo = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 {
        return Ok(vec![0.0; distances.len()]);
    }
    Ok(distances
        .iter()
        .map(|d| ((d - lo) / span).clamp(0.0, 1.0))
        .collect())
}

/// Position in `cameras` of the camera nearest to `point`. Ties go to the
/// lowest camera id.
pub fn closest_camera(cameras: &[Camera], point: &Point2<f64>, mode: DistanceMode) -> Result<usize> {
    if cameras.is_empty() {
        return Err(invalid("closest_camera needs at least one camera"));
    }
    let mut best = 0;
    let mut best_d = camera_distance(&cameras[0], point, mode);
    for (k, cam) in cameras.iter().enumerate().skip(1) {
        let d = camera_distance(cam, point, mode);
        if d < best_d || (d == best_d && cam.id < cameras[best].id) {
            best = k;
            best_d = d;
        }
    }
    Ok(best)
}

/// An oriented 2D covariance with variance `sigma1_sq` along the view ray and
/// `sigma2_sq` across it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceSpec {
    pub beta: f64,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub s: Matrix2<f64>,
    pub s_inv: Matrix2<f64>,
}

impl CovarianceSpec {
    /// `d^T S^-1 d`.
    pub fn quadratic_form(&self, d: &Vector2<f64>) -> f64 {
        d.dot(&(self.s_inv * d))
    }

    pub fn frame(&self) -> ViewRayFrame {
        ViewRayFrame::new(self.beta)
    }

    pub fn isotropic(sigma_sq: f64) -> Result<Self> {
        build_covariance(0.0, sigma_sq, sigma_sq)
    }
}

/// `S = R diag(sigma1_sq, sigma2_sq) R^T` with `R` the rotation by `beta`.
///
/// Assembled as `sigma2_sq I + (sigma1_sq - sigma2_sq) u u^T` with `u` the
/// view-ray direction, which is the same matrix and is exactly `sigma^2 I`
/// when the variances coincide.
pub fn build_covariance(beta: f64, sigma1_sq: f64, sigma2_sq: f64) -> Result<CovarianceSpec> {
    for (name, v) in [("sigma1_sq", sigma1_sq), ("sigma2_sq", sigma2_sq)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(invalid(format!("{name} must be positive and finite, got {v}")));
        }
    }
    let u = ViewRayFrame::new(beta).along();
    let uu = u * u.transpose();
    let s = Matrix2::identity() * sigma2_sq + uu * (sigma1_sq - sigma2_sq);
    let s_inv = Matrix2::identity() * sigma2_sq.recip() + uu * (sigma1_sq.recip() - sigma2_sq.recip());
    Ok(CovarianceSpec {
        beta,
        sigma1_sq,
        sigma2_sq,
        s,
        s_inv,
    })
}

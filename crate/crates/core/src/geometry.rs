//! Projection model, weak-perspective reconstruction residual and synthetic
//! camera sampling.
//!
//! The full camera model (rotation, translation, intrinsics, per-point
//! scales) lives only in the synthetic generator; the learned pipeline never
//! estimates camera parameters explicitly — the projection is implicit in
//! the right pseudo-inverse of the reconstruction residual.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("universe needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("point {index} projects at zero or negative depth ({depth:.3e})")]
    PointAtZeroDepth { index: usize, depth: f64 },
    #[error("camera scales cover {scales} points but {points} were given")]
    ScaleCountMismatch { scales: usize, points: usize },
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
    #[error("reconstruction expects U 4xN and V 3xN, got {u_rows}x{u_cols} and {v_rows}x{v_cols}")]
    ResidualShape {
        u_rows: usize,
        u_cols: usize,
        v_rows: usize,
        v_cols: usize,
    },
    #[error("empty point set")]
    EmptyPointSet,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Per-category 3D points in world coordinates, one row per point.
#[derive(Debug, Clone)]
pub struct UniversePoints {
    category: usize,
    points: Vec<[f64; 3]>,
}

impl UniversePoints {
    pub fn new(category: usize, points: Vec<[f64; 3]>) -> Result<Self, GeometryError> {
        if points.len() < 4 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        Ok(Self { category, points })
    }

    pub fn category(&self) -> usize {
        self.category
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Homogeneous coordinates as a `4 x d` tensor (ones appended).
    pub fn homogeneous_tensor(&self) -> Tensor {
        let d = self.points.len();
        let mut data = vec![0.0; 4 * d];
        for (i, p) in self.points.iter().enumerate() {
            data[i] = p[0];
            data[d + i] = p[1];
            data[2 * d + i] = p[2];
            data[3 * d + i] = 1.0;
        }
        Tensor::from_vec(4, d, data).expect("universe points are finite")
    }
}

/// How the per-point scale parameters of the projection are determined.
#[derive(Debug, Clone)]
pub enum CameraScales {
    /// Weak perspective: one shared scale for all points.
    Uniform(f64),
    /// Explicit per-point scales (diagonal of the scale matrix).
    PerPoint(Vec<f64>),
    /// Full perspective: scale of each point is its inverse depth.
    InverseDepth,
}

/// A camera with rotation, translation, intrinsics and scale model.
#[derive(Debug, Clone)]
pub struct Camera {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    intrinsics: Matrix3<f64>,
    scales: CameraScales,
}

impl Camera {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        intrinsics: Matrix3<f64>,
        scales: CameraScales,
    ) -> Result<Self, GeometryError> {
        let rtr = rotation.transpose() * rotation;
        if (rtr - Matrix3::identity()).norm() > 1e-10 {
            return Err(GeometryError::InvalidCamera("rotation is not orthonormal"));
        }
        if (rotation.determinant() - 1.0).abs() > 1e-10 {
            return Err(GeometryError::InvalidCamera("rotation determinant is not +1"));
        }
        if (intrinsics[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(GeometryError::InvalidCamera("intrinsics K[2][2] must be 1"));
        }
        if intrinsics[(1, 0)].abs() > 1e-12
            || intrinsics[(2, 0)].abs() > 1e-12
            || intrinsics[(2, 1)].abs() > 1e-12
        {
            return Err(GeometryError::InvalidCamera("intrinsics must be upper triangular"));
        }
        Ok(Self {
            rotation,
            translation,
            intrinsics,
            scales,
        })
    }

    /// Identity camera at the origin with uniform scale 1.
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            intrinsics: Matrix3::identity(),
            scales: CameraScales::Uniform(1.0),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn scales(&self) -> &CameraScales {
        &self.scales
    }

    pub fn with_scales(mut self, scales: CameraScales) -> Self {
        self.scales = scales;
        self
    }
}

/// Image-plane keypoints; the homogeneous representation appends a ones row.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPoints {
    points: Vec<[f64; 2]>,
}

impl ProjectedPoints {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    /// Homogeneous coordinates as a `3 x m` tensor, third row exactly 1.
    pub fn homogeneous_tensor(&self) -> Tensor {
        let m = self.points.len();
        let mut data = vec![0.0; 3 * m];
        for (i, p) in self.points.iter().enumerate() {
            data[i] = p[0];
            data[m + i] = p[1];
            data[2 * m + i] = 1.0;
        }
        Tensor::from_vec(3, m, data).expect("projected points are finite")
    }
}

/// Projects universe points through the camera: `V = K [R|T] U` scaled per
/// point, homogeneous third row normalized to exactly 1.
pub fn project(u: &UniversePoints, cam: &Camera) -> Result<ProjectedPoints, GeometryError> {
    let d = u.len();
    if let CameraScales::PerPoint(s) = &cam.scales {
        if s.len() != d {
            return Err(GeometryError::ScaleCountMismatch {
                scales: s.len(),
                points: d,
            });
        }
    }
    let mut out = Vec::with_capacity(d);
    for (i, p) in u.points().iter().enumerate() {
        let world = Vector3::new(p[0], p[1], p[2]);
        let x = cam.intrinsics * (cam.rotation * world + cam.translation);
        let lambda = match &cam.scales {
            CameraScales::Uniform(l) => *l,
            CameraScales::PerPoint(s) => s[i],
            CameraScales::InverseDepth => {
                if x.z <= 1e-12 {
                    return Err(GeometryError::PointAtZeroDepth {
                        index: i,
                        depth: x.z,
                    });
                }
                1.0 / x.z
            }
        };
        out.push([lambda * x.x, lambda * x.y]);
    }
    Ok(ProjectedPoints::new(out))
}

/// Frobenius residual of the best linear re-projection of `V` onto the row
/// space of `U`: `||V U+ U - V||_F^2`, differentiable w.r.t. both inputs.
///
/// Columns of `U` and `V` must correspond; occluded columns are removed by
/// the caller before this is evaluated.
pub fn reconstruction_residual(
    tape: &mut Tape,
    u: &Tensor,
    v: &Tensor,
    cond_cap: f64,
) -> Result<Tensor, GeometryError> {
    if u.rows() != 4 || v.rows() != 3 || u.cols() != v.cols() || u.cols() < 4 {
        return Err(GeometryError::ResidualShape {
            u_rows: u.rows(),
            u_cols: u.cols(),
            v_rows: v.rows(),
            v_cols: v.cols(),
        });
    }
    let pinv = tape.right_pseudo_inverse(u, cond_cap)?;
    let coeff = tape.matmul(v, &pinv)?;
    let reproj = tape.matmul(&coeff, u)?;
    let diff = tape.sub(&reproj, v)?;
    Ok(tape.frobenius_sq(&diff)?)
}

/// Default condition cap for the pseudo-inverse path.
pub const DEFAULT_COND_CAP: f64 = 1e8;

/// Ranges for the synthetic weak-perspective camera sampler.
#[derive(Debug, Clone)]
pub struct CameraSampleConfig {
    /// Translations are uniform in `[-extent, extent]^3`.
    pub translation_extent: f64,
    /// Uniform scale range for the shared weak-perspective scale.
    pub scale_range: (f64, f64),
}

impl Default for CameraSampleConfig {
    fn default() -> Self {
        Self {
            translation_extent: 1.0,
            scale_range: (0.5, 2.0),
        }
    }
}

/// Samples a weak-perspective camera: rotation uniform on SO(3) via a
/// normalized Gaussian quaternion, translation in a box, uniform scale,
/// identity intrinsics. Deterministic per seed.
pub fn sample_weak_perspective_camera(seed: u64) -> Camera {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_weak_perspective_camera_with(&mut rng, &CameraSampleConfig::default())
}

/// Sampler variant drawing from a caller-provided stream.
pub fn sample_weak_perspective_camera_with(
    rng: &mut ChaCha8Rng,
    config: &CameraSampleConfig,
) -> Camera {
    let q: [f64; 4] = {
        let mut q = [0.0; 4];
        for v in &mut q {
            *v = rng.sample(StandardNormal);
        }
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut q {
            *v /= norm;
        }
        q
    };
    let rotation = rotation_from_quaternion(q);
    let e = config.translation_extent;
    let translation = Vector3::new(
        rng.gen_range(-e..=e),
        rng.gen_range(-e..=e),
        rng.gen_range(-e..=e),
    );
    let (lo, hi) = config.scale_range;
    let lambda = rng.gen_range(lo..=hi);
    Camera {
        rotation,
        translation,
        intrinsics: Matrix3::identity(),
        scales: CameraScales::Uniform(lambda),
    }
}

fn rotation_from_quaternion([w, x, y, z]: [f64; 4]) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Affine map taking a keypoint set into `[-1, 1]^2` and back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationTransform {
    pub center: [f64; 2],
    pub scale: f64,
}

impl NormalizationTransform {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.center[0]) / self.scale,
            (p[1] - self.center[1]) / self.scale,
        ]
    }

    pub fn invert(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0] * self.scale + self.center[0],
            p[1] * self.scale + self.center[1],
        ]
    }
}

/// Maps keypoints into `[-1, 1]^2` by bounding-box center and isotropic
/// half-extent. Degenerate zero-extent sets map to the origin with scale 1.
pub fn normalize_keypoints(
    points: &[[f64; 2]],
) -> Result<(Vec<[f64; 2]>, NormalizationTransform), GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyPointSet);
    }
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for p in points {
        for a in 0..2 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    let center = [0.5 * (min[0] + max[0]), 0.5 * (min[1] + max[1])];
    let half = ((max[0] - min[0]) * 0.5).max((max[1] - min[1]) * 0.5);
    let scale = if half > 0.0 { half } else { 1.0 };
    let t = NormalizationTransform { center, scale };
    Ok((points.iter().map(|&p| t.apply(p)).collect(), t))
}

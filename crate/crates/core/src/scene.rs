//! Gaussian scene representation.
//!
//! Every parameter lives in an unconstrained space: rotations are raw quaternions
//! normalized at use, scales are stored as logs and opacities as logits. Any real
//! parameter vector therefore describes a valid Gaussian.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Initial opacity before the logit transform.
pub const INITIAL_OPACITY: f64 = 0.1;
/// Isotropic scale given to a seed point that has no neighbours.
pub const LONE_POINT_SCALE: f64 = 0.1;
const MIN_INITIAL_SCALE: f64 = 1e-7;
const NEIGHBOURS_FOR_SCALE: usize = 3;

pub const MIN_FEATURE_DIM: usize = 3;
pub const MAX_FEATURE_DIM: usize = 64;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One splat primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub position: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`; need not be unit length.
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub feature: Vec<f64>,
}

impl Gaussian3D {
    pub fn new(position: Vector3<f64>, scale: f64, opacity: f64, feature: Vec<f64>) -> Self {
        Gaussian3D {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::repeat(scale.ln()),
            opacity_logit: logit(opacity),
            feature,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn unit_quaternion(&self) -> [f64; 4] {
        normalize_quaternion(&self.rotation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quaternion_to_matrix(&self.unit_quaternion())
    }

    /// `R S`, the factor whose outer product is the covariance.
    pub fn covariance_factor(&self) -> Matrix3<f64> {
        let s = self.scale();
        let mut m = self.rotation_matrix();
        for j in 0..3 {
            for i in 0..3 {
                m[(i, j)] *= s[j];
            }
        }
        m
    }

    /// 3D covariance `R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        covariance3d(self)
    }

    /// Rounds every parameter to the nearest binary32 value, the precision of the scene file.
    pub fn round_to_f32(&mut self) {
        let r = |v: &mut f64| *v = *v as f32 as f64;
        self.position.iter_mut().for_each(r);
        self.rotation.iter_mut().for_each(r);
        self.log_scale.iter_mut().for_each(r);
        r(&mut self.opacity_logit);
        self.feature.iter_mut().for_each(r);
    }
}

pub fn covariance3d(g: &Gaussian3D) -> Matrix3<f64> {
    let m = g.covariance_factor();
    m * m.transpose()
}

/// Unit quaternion; a zero quaternion maps to the identity rotation.
pub fn normalize_quaternion(q: &[f64; 4]) -> [f64; 4] {
    let n = quaternion_norm(q);
    if n < 1e-30 || !n.is_finite() {
        return [1.0, 0.0, 0.0, 0.0];
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

fn quaternion_norm(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quaternion_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
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

/// Pulls a gradient on the rotation matrix back to the raw (unnormalized) quaternion.
pub fn quaternion_backward(raw: &[f64; 4], d_rot: &Matrix3<f64>) -> [f64; 4] {
    let n = quaternion_norm(raw);
    if n < 1e-30 || !n.is_finite() {
        return [0.0; 4];
    }
    let q = [raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n];
    let [w, x, y, z] = q;
    let g = |i: usize, j: usize| d_rot[(i, j)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let dq = [dw, dx, dy, dz];
    let dot: f64 = (0..4).map(|i| q[i] * dq[i]).sum();
    [
        (dq[0] - q[0] * dot) / n,
        (dq[1] - q[1] * dot) / n,
        (dq[2] - q[2] * dot) / n,
        (dq[3] - q[3] * dot) / n,
    ]
}

/// A set of Gaussians sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatScene {
    pub gaussians: Vec<Gaussian3D>,
    pub feature_dim: usize,
    /// Number of semantic classes; 0 for an RGB-only scene.
    pub class_count: usize,
}

impl SplatScene {
    pub fn new(gaussians: Vec<Gaussian3D>, feature_dim: usize, class_count: usize) -> Result<Self> {
        let scene = SplatScene {
            gaussians,
            feature_dim,
            class_count,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn empty(feature_dim: usize, class_count: usize) -> Self {
        SplatScene {
            gaussians: Vec::new(),
            feature_dim,
            class_count,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::InvalidInput("feature dimension must be positive".into()));
        }
        if let Some((i, g)) = self
            .gaussians
            .iter()
            .enumerate()
            .find(|(_, g)| g.feature.len() != self.feature_dim)
        {
            return Err(Error::InvalidInput(format!(
                "gaussian {i} has {} feature entries, scene expects {}",
                g.feature.len(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        self.gaussians.iter_mut().for_each(Gaussian3D::round_to_f32);
    }

    /// Axis-aligned bounds of the Gaussian centers.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = self.gaussians.first()?.position;
        Some(self.gaussians.iter().fold((first, first), |(lo, hi), g| {
            (lo.inf(&g.position), hi.sup(&g.position))
        }))
    }
}

/// Builds one Gaussian per seed point with standard-normal features.
///
/// Scale is isotropic: the mean distance to the three nearest other seed points.
pub fn init_scene(
    seed_points: &[Vector3<f64>],
    feature_dim: usize,
    class_count: usize,
    rng_seed: u64,
) -> Result<SplatScene> {
    if seed_points.is_empty() {
        return Err(Error::InvalidInput("init_scene needs at least one seed point".into()));
    }
    if !(MIN_FEATURE_DIM..=MAX_FEATURE_DIM).contains(&feature_dim) {
        return Err(Error::InvalidInput(format!(
            "feature dimension {feature_dim} outside {MIN_FEATURE_DIM}..={MAX_FEATURE_DIM}"
        )));
    }
    if let Some(p) = seed_points.iter().find(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::InvalidInput(format!("non-finite seed point {p:?}")));
    }
    let scales = neighbour_scales(seed_points);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let gaussians = seed_points
        .iter()
        .zip(scales)
        .map(|(p, scale)| {
            let feature = (0..feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            Gaussian3D::new(*p, scale, INITIAL_OPACITY, feature)
        })
        .collect();
    SplatScene::new(gaussians, feature_dim, class_count)
}

fn neighbour_scales(points: &[Vector3<f64>]) -> Vec<f64> {
    let k = NEIGHBOURS_FOR_SCALE.min(points.len() - 1);
    if k == 0 {
        return vec![LONE_POINT_SCALE; points.len()];
    }
    let mut nearest = Vec::with_capacity(k + 1);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            nearest.clear();
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p - q).norm();
                if nearest.len() < k {
                    nearest.push(d);
                    nearest.sort_by(f64::total_cmp);
                } else if d < nearest[k - 1] {
                    nearest[k - 1] = d;
                    nearest.sort_by(f64::total_cmp);
                }
            }
            let mean = nearest.iter().sum::<f64>() / k as f64;
            mean.max(MIN_INITIAL_SCALE)
        })
        .collect()
}

/// Reads seed points from a text file with one `x y z` triple per line.
/// Blank lines and lines starting with `#` are ignored.
pub fn read_xyz_points(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if vals.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "{}:{}: expected `x y z`",
                path.display(),
                lineno + 1
            )));
        }
        points.push(Vector3::new(vals[0], vals[1], vals[2]));
    }
    Ok(points)
}

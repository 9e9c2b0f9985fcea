use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{ALPHA_CLAMP, ALPHA_SKIP, FOOTPRINT_MAHALANOBIS_SQ, LOW_PASS_DILATION};
use crate::camera::Camera;
use crate::scene::{quaternion_backward, Gaussian3D};

/// A Gaussian projected into one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    /// Pixel coordinates of the projected center.
    pub mean2d: Vector2<f64>,
    /// Screen-space covariance `J W Σ Wᵀ Jᵀ` before dilation.
    pub cov2d: Matrix2<f64>,
    /// Inverse of the dilated covariance, stored as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    /// Camera-space z of the center.
    pub depth: f64,
    pub alpha_max: f64,
    pub source_index: usize,
    /// 3σ radius of the dilated ellipse along its major axis (px).
    pub radius: f64,
    /// Inclusive pixel bounds of the footprint, clipped to the image.
    pub pixel_min: [u32; 2],
    pub pixel_max: [u32; 2],
}

/// One evaluated splat at one pixel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution {
    pub alpha: f64,
    pub gauss: f64,
    pub dx: f64,
    pub dy: f64,
    pub clamped: bool,
}

impl Splat2D {
    /// Squared Mahalanobis distance of the sample point from the center.
    #[inline]
    pub fn mahalanobis_sq(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean2d.x;
        let dy = py - self.mean2d.y;
        let [a, b, c] = self.conic;
        a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    }

    /// Opacity at a sample point, or `None` when the point is outside the footprint
    /// or the contribution falls below the skip threshold.
    #[inline]
    pub fn alpha_at(&self, px: f64, py: f64) -> Option<f64> {
        self.contribution(px, py).map(|c| c.alpha)
    }

    #[inline]
    pub(crate) fn contribution(&self, px: f64, py: f64) -> Option<Contribution> {
        let dx = px - self.mean2d.x;
        let dy = py - self.mean2d.y;
        let [a, b, c] = self.conic;
        let m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        if !(m <= FOOTPRINT_MAHALANOBIS_SQ) {
            return None;
        }
        let gauss = (-0.5 * m).exp();
        let raw = self.alpha_max * gauss;
        let clamped = raw > ALPHA_CLAMP;
        let alpha = if clamped { ALPHA_CLAMP } else { raw };
        if alpha < ALPHA_SKIP {
            return None;
        }
        Some(Contribution {
            alpha,
            gauss,
            dx,
            dy,
            clamped,
        })
    }
}

/// Pinhole Jacobian of the projection at camera-space point `t`.
fn projection_jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz2,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz2,
    )
}

/// Projects a Gaussian into `cam`. Returns `None` when the center is not in front of
/// the near plane or the 3σ footprint misses the image.
pub fn project(g: &Gaussian3D, cam: &Camera, near: f64, source_index: usize) -> Option<Splat2D> {
    let t = cam.world_to_camera(&g.position);
    if !(t.z > near) {
        return None;
    }
    let mean2d = cam.project(&t);
    let j = projection_jacobian(cam, &t);
    let w = cam.rotation_w2c;
    let cov_cam = w * g.covariance() * w.transpose();
    let cov2d = j * cov_cam * j.transpose();
    let a = cov2d[(0, 0)] + LOW_PASS_DILATION;
    let b = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    let c = cov2d[(1, 1)] + LOW_PASS_DILATION;
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() || !mean2d.iter().all(|v| v.is_finite()) {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = 3.0 * lambda_max.sqrt();

    // Pixels whose centers lie within `radius` of the mean.
    let u_lo = (mean2d.x - radius - 0.5).ceil();
    let u_hi = (mean2d.x + radius - 0.5).floor();
    let v_lo = (mean2d.y - radius - 0.5).ceil();
    let v_hi = (mean2d.y + radius - 0.5).floor();
    let (wf, hf) = (cam.width as f64, cam.height as f64);
    if u_hi < 0.0 || v_hi < 0.0 || u_lo > wf - 1.0 || v_lo > hf - 1.0 || u_lo > u_hi || v_lo > v_hi {
        return None;
    }
    let pixel_min = [u_lo.max(0.0) as u32, v_lo.max(0.0) as u32];
    let pixel_max = [u_hi.min(wf - 1.0) as u32, v_hi.min(hf - 1.0) as u32];

    Some(Splat2D {
        mean2d,
        cov2d,
        conic,
        depth: t.z,
        alpha_max: g.opacity(),
        source_index,
        radius,
        pixel_min,
        pixel_max,
    })
}

/// Gradients of one Gaussian's geometry, pulled back through the projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionGrad {
    pub position: Vector3<f64>,
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
}

/// Backward of [`project`] for the screen-space mean and conic.
///
/// `d_conic` holds `∂L/∂a, ∂L/∂b, ∂L/∂c` where `b` is the shared off-diagonal entry.
pub fn project_backward(g: &Gaussian3D, cam: &Camera, d_mean2d: &Vector2<f64>, d_conic: &[f64; 3]) -> ProjectionGrad {
    let t = cam.world_to_camera(&g.position);
    let w = cam.rotation_w2c;
    let j = projection_jacobian(cam, &t);
    let factor = g.covariance_factor();
    let sigma = factor * factor.transpose();
    let cov_cam = w * sigma * w.transpose();
    let cov2d = j * cov_cam * j.transpose();
    let a = cov2d[(0, 0)] + LOW_PASS_DILATION;
    let b = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    let c = cov2d[(1, 1)] + LOW_PASS_DILATION;
    let det = a * c - b * b;
    let q = Matrix2::new(c / det, -b / det, -b / det, a / det);

    // conic = inverse(dilated cov): dΣ = -Q dQ Q with the off-diagonal gradient split evenly.
    let d_q = Matrix2::new(d_conic[0], 0.5 * d_conic[1], 0.5 * d_conic[1], d_conic[2]);
    let d_cov2d = -(q * d_q * q);

    let d_cov_cam: Matrix3<f64> = j.transpose() * d_cov2d * j;
    let d_j: Matrix2x3<f64> = 2.0 * d_cov2d * j * cov_cam;
    let d_sigma = w.transpose() * d_cov_cam * w;
    let d_factor = 2.0 * d_sigma * factor;

    let rot = g.rotation_matrix();
    let scale = g.scale();
    let mut d_rot = Matrix3::zeros();
    let mut d_log_scale = Vector3::zeros();
    for col in 0..3 {
        let mut ds = 0.0;
        for row in 0..3 {
            d_rot[(row, col)] = d_factor[(row, col)] * scale[col];
            ds += d_factor[(row, col)] * rot[(row, col)];
        }
        d_log_scale[col] = ds * scale[col];
    }
    let d_rotation = quaternion_backward(&g.rotation, &d_rot);

    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut d_t = Vector3::new(
        d_mean2d.x * fx * iz,
        d_mean2d.y * fy * iz,
        -d_mean2d.x * fx * t.x * iz2 - d_mean2d.y * fy * t.y * iz2,
    );
    d_t.x += -d_j[(0, 2)] * fx * iz2;
    d_t.y += -d_j[(1, 2)] * fy * iz2;
    d_t.z += -d_j[(0, 0)] * fx * iz2 + d_j[(0, 2)] * 2.0 * fx * t.x * iz3 - d_j[(1, 1)] * fy * iz2
        + d_j[(1, 2)] * 2.0 * fy * t.y * iz3;

    ProjectionGrad {
        position: w.transpose() * d_t,
        rotation: d_rotation,
        log_scale: d_log_scale,
    }
}

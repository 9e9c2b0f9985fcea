//! Pinhole camera with a world-to-camera pose.
//!
//! Conventions: camera space looks down +z, pixel origin is the top-left
//! corner and pixel `(u, v)` is sampled at its center `(u + 0.5, v + 0.5)`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation_w2c: Matrix3<f64>,
    pub translation_w2c: Vector3<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation_w2c: Matrix3<f64>,
        translation_w2c: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation_w2c,
            translation_w2c,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`. `up` is the world direction that should
    /// appear towards the top of the image (image v grows downward).
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidInput("look_at: eye equals target".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(Error::InvalidInput("look_at: up is parallel to view direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        // Rows are the camera axes expressed in world coordinates.
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Camera::new(
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("image size must be at least 1x1".into()));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() || !self.translation_w2c.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("camera has non-finite parameters".into()));
        }
        let r = &self.rotation_w2c;
        let gram = r.transpose() * r - Matrix3::identity();
        let err = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(err <= ORTHONORMAL_TOL) || r.determinant() < 0.0 {
            return Err(Error::InvalidInput(format!(
                "rotation_w2c is not a proper rotation (orthonormality error {err:e})"
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Camera position in world coordinates, `-Rᵀ t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation_w2c.transpose() * self.translation_w2c)
    }

    /// Orientation of the camera-to-world rotation as intrinsic XYZ Euler angles (radians),
    /// i.e. `Rᵀ = Rx(a) · Ry(b) · Rz(c)`.
    pub fn euler_xyz(&self) -> Vector3<f64> {
        let r = self.rotation_w2c.transpose();
        let b = r[(0, 2)].clamp(-1.0, 1.0).asin();
        let a = (-r[(1, 2)]).atan2(r[(2, 2)]);
        let c = (-r[(0, 1)]).atan2(r[(0, 0)]);
        Vector3::new(a, b, c)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_w2c * p + self.translation_w2c
    }

    /// Pinhole projection of a camera-space point. No depth check.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }

    /// Same intrinsics and pose at a different resolution, with the principal point
    /// and focal lengths scaled to match.
    pub fn resized(&self, width: u32, height: u32) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }
}

/// JSON description of a camera, shared by the dataset manifest and the render service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraDesc {
    pub w: u32,
    pub h: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl CameraDesc {
    pub fn to_camera(&self) -> Result<Camera> {
        Camera::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.w,
            self.h,
            Matrix3::from_row_slice(&self.r),
            Vector3::from_row_slice(&self.t),
        )
    }
}

impl From<&Camera> for CameraDesc {
    fn from(cam: &Camera) -> Self {
        let r = &cam.rotation_w2c;
        CameraDesc {
            w: cam.width,
            h: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            r: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            t: [cam.translation_w2c.x, cam.translation_w2c.y, cam.translation_w2c.z],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    #[test]
    fn look_at_centers_target() {
        let cam = Camera::look_at(
            Vector3::new(3.0, 1.0, -2.0),
            Vector3::new(0.5, 0.2, 0.1),
            Vector3::y(),
            50.0,
            50.0,
            64,
            48,
        )
        .unwrap();
        let pc = cam.world_to_camera(&Vector3::new(0.5, 0.2, 0.1));
        assert!(pc.z > 0.0);
        let px = cam.project(&pc);
        assert!((px.x - 32.0).abs() < 1e-12 && (px.y - 24.0).abs() < 1e-12);
        assert!((cam.camera_center() - Vector3::new(3.0, 1.0, -2.0)).norm() < 1e-12);
    }

    #[test]
    fn up_vector_maps_to_top_of_image() {
        let cam = Camera::look_at(Vector3::new(0.0, 0.0, -5.0), Vector3::zeros(), Vector3::y(), 50.0, 50.0, 64, 64)
            .unwrap();
        let above = cam.project(&cam.world_to_camera(&Vector3::new(0.0, 1.0, 0.0)));
        assert!(above.y < 32.0);
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 1.0 + 1e-6;
        let err = Camera::new(10.0, 10.0, 5.0, 5.0, 10, 10, r, Vector3::zeros()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Camera::new(10.0, 10.0, 5.0, 5.0, 10, 10, reflect, Vector3::zeros()).is_err());
        assert!(Camera::new(0.0, 10.0, 5.0, 5.0, 10, 10, Matrix3::identity(), Vector3::zeros()).is_err());
    }

    #[test]
    fn euler_roundtrip() {
        let (a, b, c) = (0.3, -0.7, 1.1);
        let c2w = Rotation3::from_axis_angle(&Vector3::x_axis(), a)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), b)
            * Rotation3::from_axis_angle(&Vector3::z_axis(), c);
        let cam = Camera::new(
            10.0,
            10.0,
            5.0,
            5.0,
            10,
            10,
            c2w.matrix().transpose(),
            Vector3::new(0.1, 0.2, 0.3),
        )
        .unwrap();
        let e = cam.euler_xyz();
        assert!((e - Vector3::new(a, b, c)).norm() < 1e-12);
    }

    #[test]
    fn desc_roundtrip() {
        let cam = Camera::look_at(Vector3::new(1.0, 2.0, 3.0), Vector3::zeros(), Vector3::y(), 40.0, 42.0, 20, 30)
            .unwrap();
        let desc = CameraDesc::from(&cam);
        let json = serde_json::to_string(&desc).unwrap();
        assert!(json.contains("\"R\""));
        let back: CameraDesc = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_camera().unwrap(), cam);
    }
}

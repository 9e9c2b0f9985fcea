#![allow(dead_code)]

use featsplat::camera::Camera;
use featsplat::scene::{logit, Gaussian3D, SplatScene};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;

/// Identity rotation and translation `(0, 0, 4)`: world points with `z > -4` are in
/// front of the camera.
pub fn front_camera(width: u32, height: u32) -> Camera {
    Camera::new(
        width as f64 * 1.1,
        width as f64 * 1.1,
        width as f64 / 2.0,
        height as f64 / 2.0,
        width,
        height,
        Matrix3::identity(),
        Vector3::new(0.0, 0.0, 4.0),
    )
    .unwrap()
}

/// `n` random Gaussians with pairwise distinct depths in front of [`front_camera`].
pub fn random_scene(n: usize, feature_dim: usize, rng: &mut impl Rng) -> SplatScene {
    let mut depths: Vec<f64> = (0..n).map(|k| -1.5 + 3.0 * (k as f64 + rng.random_range(0.1..0.9)) / n as f64).collect();
    // Shuffle so index order and depth order disagree.
    for i in (1..n).rev() {
        depths.swap(i, rng.random_range(0..=i));
    }
    let gaussians = depths
        .into_iter()
        .map(|z| Gaussian3D {
            position: Vector3::new(rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2), z),
            rotation: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            log_scale: Vector3::from_fn(|_, _| rng.random_range(0.03f64..0.35).ln()),
            opacity_logit: logit(rng.random_range(0.05..0.995)),
            feature: (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    SplatScene::new(gaussians, feature_dim, 0).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

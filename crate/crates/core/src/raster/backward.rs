use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use super::forward::{scene_fingerprint, ForwardState};
use super::project::{project_backward, Contribution};
use super::{pixel_center, RenderOutput, TRANSMITTANCE_STOP};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::scene::SplatScene;

/// Per-Gaussian gradients, indexed like `scene.gaussians`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradients {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    /// Flat `N × D`.
    pub feature: Vec<f64>,
    /// Gradient with respect to the projected center, in pixels.
    pub mean2d: Vec<Vector2<f64>>,
    /// Whether the Gaussian survived projection in this view.
    pub visible: Vec<bool>,
}

impl SceneGradients {
    pub fn zeros(count: usize, feature_dim: usize) -> Self {
        SceneGradients {
            position: vec![Vector3::zeros(); count],
            rotation: vec![[0.0; 4]; count],
            log_scale: vec![Vector3::zeros(); count],
            opacity_logit: vec![0.0; count],
            feature: vec![0.0; count * feature_dim],
            mean2d: vec![Vector2::zeros(); count],
            visible: vec![false; count],
        }
    }
}

/// Screen-space gradients for one splat.
#[derive(Debug, Clone)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    alpha_max: f64,
    feature: Vec<f64>,
}

impl SplatGrad {
    fn zeros(dim: usize) -> Self {
        SplatGrad {
            mean: [0.0; 2],
            conic: [0.0; 3],
            alpha_max: 0.0,
            feature: vec![0.0; dim],
        }
    }

    fn add(&mut self, other: &SplatGrad) {
        self.mean[0] += other.mean[0];
        self.mean[1] += other.mean[1];
        for k in 0..3 {
            self.conic[k] += other.conic[k];
        }
        self.alpha_max += other.alpha_max;
        for (a, b) in self.feature.iter_mut().zip(&other.feature) {
            *a += b;
        }
    }
}

/// Reverse-mode gradients of the blended feature map (and optionally the residual
/// transmittance map) with respect to every Gaussian parameter.
///
/// `output` must come from [`super::blend_forward`] on the same scene and camera.
pub fn blend_backward(
    scene: &SplatScene,
    cam: &Camera,
    output: &RenderOutput,
    d_feature_map: &[f64],
    d_transmittance: Option<&[f64]>,
) -> Result<SceneGradients> {
    let state = output
        .state
        .as_ref()
        .ok_or_else(|| Error::Contract("render output carries no forward state".into()))?;
    if state.gaussian_count != scene.len() || state.fingerprint != scene_fingerprint(scene) {
        return Err(Error::Contract("backward called with a scene different from the forward pass".into()));
    }
    if state.camera != *cam {
        return Err(Error::Contract("backward called with a camera different from the forward pass".into()));
    }
    let dim = scene.feature_dim;
    let pixels = output.pixel_count();
    if d_feature_map.len() != pixels * dim {
        return Err(Error::Contract(format!(
            "feature gradient has {} entries, expected {}",
            d_feature_map.len(),
            pixels * dim
        )));
    }
    if let Some(dt) = d_transmittance {
        if dt.len() != pixels {
            return Err(Error::Contract(format!(
                "transmittance gradient has {} entries, expected {pixels}",
                dt.len()
            )));
        }
    }

    let tile_grads: Vec<Vec<SplatGrad>> = (0..state.grid.tile_count())
        .into_par_iter()
        .map(|tile| backward_tile(scene, state, output, tile as u32, d_feature_map, d_transmittance))
        .collect();

    // Sequential reduction in tile order keeps the result independent of scheduling.
    let mut per_splat: Vec<SplatGrad> = vec![SplatGrad::zeros(dim); state.splats.len()];
    for (tile, grads) in tile_grads.iter().enumerate() {
        for (key, g) in state.keys[state.ranges[tile].clone()].iter().zip(grads) {
            per_splat[key.splat as usize].add(g);
        }
    }

    let mut out = SceneGradients::zeros(scene.len(), dim);
    for (splat, g) in state.splats.iter().zip(&per_splat) {
        let i = splat.source_index;
        let gaussian = &scene.gaussians[i];
        out.visible[i] = true;
        let a = splat.alpha_max;
        out.opacity_logit[i] = g.alpha_max * a * (1.0 - a);
        out.feature[i * dim..(i + 1) * dim].copy_from_slice(&g.feature);
        let d_mean = Vector2::new(g.mean[0], g.mean[1]);
        out.mean2d[i] = d_mean;
        let pg = project_backward(gaussian, cam, &d_mean, &g.conic);
        out.position[i] = pg.position;
        out.rotation[i] = pg.rotation;
        out.log_scale[i] = pg.log_scale;
    }
    Ok(out)
}

fn backward_tile(
    scene: &SplatScene,
    state: &ForwardState,
    output: &RenderOutput,
    tile: u32,
    d_feature_map: &[f64],
    d_transmittance: Option<&[f64]>,
) -> Vec<SplatGrad> {
    let dim = scene.feature_dim;
    let keys = &state.keys[state.ranges[tile as usize].clone()];
    let mut grads = vec![SplatGrad::zeros(dim); keys.len()];
    if keys.is_empty() {
        return grads;
    }
    let (u0, v0, u1, v1) = state.grid.tile_pixels(tile);
    let width = output.width as usize;
    let mut hits: Vec<(usize, Contribution, f64)> = Vec::new();
    for v in v0..v1 {
        for u in u0..u1 {
            let pixel = v as usize * width + u as usize;
            let g_feat = &d_feature_map[pixel * dim..(pixel + 1) * dim];
            let g_t = d_transmittance.map_or(0.0, |d| d[pixel]);
            if g_t == 0.0 && g_feat.iter().all(|&x| x == 0.0) {
                continue;
            }
            let (px, py) = pixel_center(u, v);

            // Replay the forward pass for this pixel.
            hits.clear();
            let mut t = 1.0;
            for (k, key) in keys.iter().enumerate() {
                let s = &state.splats[key.splat as usize];
                if u < s.pixel_min[0] || u > s.pixel_max[0] || v < s.pixel_min[1] || v > s.pixel_max[1] {
                    continue;
                }
                let Some(c) = s.contribution(px, py) else {
                    continue;
                };
                hits.push((k, c, t));
                t *= 1.0 - c.alpha;
                if t < TRANSMITTANCE_STOP {
                    break;
                }
            }
            let t_final = t;

            // Back to front. `suffix` is Σ_{j>i} w_j ⟨g, f_j⟩.
            let mut suffix = 0.0;
            for &(k, c, t_i) in hits.iter().rev() {
                let s = &state.splats[keys[k].splat as usize];
                let feature = &scene.gaussians[s.source_index].feature;
                let w = t_i * c.alpha;
                let gf: f64 = g_feat.iter().zip(feature).map(|(a, b)| a * b).sum();
                let grad = &mut grads[k];
                for (d, g) in grad.feature.iter_mut().zip(g_feat) {
                    *d += w * g;
                }
                let d_alpha = t_i * gf - (suffix + g_t * t_final) / (1.0 - c.alpha);
                suffix += w * gf;
                if c.clamped {
                    continue;
                }
                grad.alpha_max += d_alpha * c.gauss;
                let d_gauss = d_alpha * s.alpha_max;
                let d_m = -0.5 * c.gauss * d_gauss;
                let [a, b, cc] = s.conic;
                grad.conic[0] += d_m * c.dx * c.dx;
                grad.conic[1] += d_m * 2.0 * c.dx * c.dy;
                grad.conic[2] += d_m * c.dy * c.dy;
                grad.mean[0] -= d_m * 2.0 * (a * c.dx + b * c.dy);
                grad.mean[1] -= d_m * 2.0 * (b * c.dx + cc * c.dy);
            }
        }
    }
    grads
}

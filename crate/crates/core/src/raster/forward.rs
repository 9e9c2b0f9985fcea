use std::hash::{Hash, Hasher};
use std::ops::Range;

use rayon::prelude::*;

use super::project::project;
use super::sort::{sort_splats, tile_ranges, TileGrid, TileKey};
use super::{pixel_center, RasterSettings, RenderOutput, Splat2D, TRANSMITTANCE_STOP};
use crate::camera::Camera;
use crate::scene::SplatScene;

/// Everything the backward pass needs to replay a forward render.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub camera: Camera,
    pub settings: RasterSettings,
    pub grid: TileGrid,
    pub splats: Vec<Splat2D>,
    pub keys: Vec<TileKey>,
    pub ranges: Vec<Range<usize>>,
    pub(crate) gaussian_count: usize,
    pub(crate) fingerprint: u64,
}

/// One blended splat at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelWeight {
    /// Index of the Gaussian in the scene.
    pub gaussian: usize,
    /// `T_i · α_i`.
    pub weight: f64,
    pub alpha: f64,
    /// Whether `α` hit the clamp.
    pub clamped: bool,
}

impl ForwardState {
    /// Replays the blend at pixel `(u, v)` and returns the contributing splats in
    /// front-to-back order.
    pub fn pixel_weights(&self, u: u32, v: u32) -> Vec<PixelWeight> {
        let ts = self.grid.tile_size;
        let tile = (v / ts) * self.grid.tiles_x + u / ts;
        let (px, py) = pixel_center(u, v);
        let mut t = 1.0;
        let mut out = Vec::new();
        for key in &self.keys[self.ranges[tile as usize].clone()] {
            let s = &self.splats[key.splat as usize];
            if u < s.pixel_min[0] || u > s.pixel_max[0] || v < s.pixel_min[1] || v > s.pixel_max[1] {
                continue;
            }
            let Some(c) = s.contribution(px, py) else {
                continue;
            };
            out.push(PixelWeight {
                gaussian: s.source_index,
                weight: t * c.alpha,
                alpha: c.alpha,
                clamped: c.clamped,
            });
            t *= 1.0 - c.alpha;
            if t < TRANSMITTANCE_STOP {
                break;
            }
        }
        out
    }
}

/// Hash of every learnable parameter, used to detect a backward call on a different scene.
pub(crate) fn scene_fingerprint(scene: &SplatScene) -> u64 {
    let mut h = std::hash::DefaultHasher::new();
    scene.feature_dim.hash(&mut h);
    for g in &scene.gaussians {
        g.position.iter().for_each(|v| v.to_bits().hash(&mut h));
        g.rotation.iter().for_each(|v| v.to_bits().hash(&mut h));
        g.log_scale.iter().for_each(|v| v.to_bits().hash(&mut h));
        g.opacity_logit.to_bits().hash(&mut h);
        g.feature.iter().for_each(|v| v.to_bits().hash(&mut h));
    }
    h.finish()
}

pub fn blend_forward(scene: &SplatScene, cam: &Camera) -> RenderOutput {
    blend_forward_with(scene, cam, &RasterSettings::default())
}

/// Tiled forward pass: project, bin, radix-sort and blend feature vectors front to back.
pub fn blend_forward_with(scene: &SplatScene, cam: &Camera, settings: &RasterSettings) -> RenderOutput {
    let grid = TileGrid::new(cam.width, cam.height, settings.tile_size);
    let splats: Vec<Splat2D> = scene
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project(g, cam, settings.near, i))
        .collect();
    let keys = sort_splats(&splats, &grid);
    let ranges = tile_ranges(&keys, &grid);

    let dim = scene.feature_dim;
    let mut out = RenderOutput::blank(cam.width, cam.height, dim);
    let tiles: Vec<TileBuffer> = (0..grid.tile_count())
        .into_par_iter()
        .map(|tile| render_tile(scene, &splats, &keys[ranges[tile].clone()], &grid, tile as u32))
        .collect();

    let width = cam.width as usize;
    for (tile, buf) in tiles.iter().enumerate() {
        let (u0, v0, u1, v1) = grid.tile_pixels(tile as u32);
        let tw = (u1 - u0) as usize;
        for v in v0..v1 {
            for u in u0..u1 {
                let local = (v - v0) as usize * tw + (u - u0) as usize;
                let global = v as usize * width + u as usize;
                out.feature_map[global * dim..(global + 1) * dim]
                    .copy_from_slice(&buf.features[local * dim..(local + 1) * dim]);
                out.transmittance_map[global] = buf.transmittance[local];
                out.contributor_counts[global] = buf.counts[local];
            }
        }
    }

    out.state = Some(ForwardState {
        camera: cam.clone(),
        settings: *settings,
        grid,
        splats,
        keys,
        ranges,
        gaussian_count: scene.len(),
        fingerprint: scene_fingerprint(scene),
    });
    out
}

struct TileBuffer {
    features: Vec<f64>,
    transmittance: Vec<f64>,
    counts: Vec<u32>,
}

fn render_tile(scene: &SplatScene, splats: &[Splat2D], keys: &[TileKey], grid: &TileGrid, tile: u32) -> TileBuffer {
    let dim = scene.feature_dim;
    let (u0, v0, u1, v1) = grid.tile_pixels(tile);
    let n = ((u1 - u0) * (v1 - v0)) as usize;
    let mut buf = TileBuffer {
        features: vec![0.0; n * dim],
        transmittance: vec![1.0; n],
        counts: vec![0; n],
    };
    if keys.is_empty() {
        return buf;
    }
    let mut local = 0;
    for v in v0..v1 {
        for u in u0..u1 {
            let (px, py) = pixel_center(u, v);
            let acc = &mut buf.features[local * dim..(local + 1) * dim];
            let mut t = 1.0;
            let mut count = 0;
            for key in keys {
                let s = &splats[key.splat as usize];
                if u < s.pixel_min[0] || u > s.pixel_max[0] || v < s.pixel_min[1] || v > s.pixel_max[1] {
                    continue;
                }
                let Some(c) = s.contribution(px, py) else {
                    continue;
                };
                let w = t * c.alpha;
                for (a, f) in acc.iter_mut().zip(&scene.gaussians[s.source_index].feature) {
                    *a += w * f;
                }
                t *= 1.0 - c.alpha;
                count += 1;
                if t < TRANSMITTANCE_STOP {
                    break;
                }
            }
            buf.transmittance[local] = t;
            buf.counts[local] = count;
            local += 1;
        }
    }
    buf
}

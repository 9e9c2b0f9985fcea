//! Tile-based rasterization of Gaussian feature vectors.
//!
//! Gaussians are projected to screen-space splats, binned into square tiles,
//! depth-sorted per tile with a radix sort and alpha-blended front to back.
//! [`blend_reference`] is a brute-force per-pixel path used to check the tiled
//! renderer, and [`blend_backward`] gives exact gradients of the blended feature
//! map and residual transmittance with respect to every Gaussian parameter.

mod backward;
mod forward;
mod project;
mod reference;
mod sort;

pub use backward::{blend_backward, SceneGradients};
pub use forward::{blend_forward, blend_forward_with, ForwardState, PixelWeight};
pub use project::{project, project_backward, ProjectionGrad, Splat2D};
pub use reference::blend_reference;
pub use sort::{depth_bits, sort_splats, tile_ranges, TileGrid, TileKey};

pub const DEFAULT_TILE_SIZE: u32 = 16;
/// Added to both diagonal entries of the screen-space covariance before inversion (px²).
pub const LOW_PASS_DILATION: f64 = 0.3;
pub const ALPHA_CLAMP: f64 = 0.99;
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_STOP: f64 = 1e-4;
pub const DEFAULT_NEAR: f64 = 0.01;
/// Splat footprint: pixels with squared Mahalanobis distance above this (3σ) are not evaluated.
pub const FOOTPRINT_MAHALANOBIS_SQ: f64 = 9.0;

/// Knobs for the forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterSettings {
    pub tile_size: u32,
    pub near: f64,
}

impl Default for RasterSettings {
    fn default() -> Self {
        RasterSettings {
            tile_size: DEFAULT_TILE_SIZE,
            near: DEFAULT_NEAR,
        }
    }
}

/// Blended feature map plus residual transmittance.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    pub feature_dim: usize,
    /// Row-major `H × W × D`.
    pub feature_map: Vec<f64>,
    /// Row-major `H × W`, transmittance left after the last blended splat.
    pub transmittance_map: Vec<f64>,
    pub contributor_counts: Vec<u32>,
    /// Projection and sort results kept for the backward pass. `None` for reference renders.
    pub state: Option<ForwardState>,
}

impl RenderOutput {
    pub(crate) fn blank(width: u32, height: u32, feature_dim: usize) -> Self {
        let n = width as usize * height as usize;
        RenderOutput {
            width,
            height,
            feature_dim,
            feature_map: vec![0.0; n * feature_dim],
            transmittance_map: vec![1.0; n],
            contributor_counts: vec![0; n],
            state: None,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn feature(&self, u: u32, v: u32) -> &[f64] {
        let i = (v as usize * self.width as usize + u as usize) * self.feature_dim;
        &self.feature_map[i..i + self.feature_dim]
    }

    pub fn transmittance(&self, u: u32, v: u32) -> f64 {
        self.transmittance_map[v as usize * self.width as usize + u as usize]
    }
}

/// Pixel sample point for pixel `(u, v)`.
#[inline]
pub fn pixel_center(u: u32, v: u32) -> (f64, f64) {
    (u as f64 + 0.5, v as f64 + 0.5)
}

use super::project::project;
use super::{pixel_center, RenderOutput, ALPHA_CLAMP, ALPHA_SKIP, DEFAULT_NEAR, FOOTPRINT_MAHALANOBIS_SQ, TRANSMITTANCE_STOP};
use crate::camera::Camera;
use crate::scene::SplatScene;

/// Brute-force renderer: every projected Gaussian is evaluated at every pixel and the
/// surviving contributions are ordered with a comparison sort. No tiling. Meant for
/// checking [`super::blend_forward`] on small scenes.
pub fn blend_reference(scene: &SplatScene, cam: &Camera) -> RenderOutput {
    let dim = scene.feature_dim;
    let mut out = RenderOutput::blank(cam.width, cam.height, dim);
    let splats: Vec<_> = scene
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project(g, cam, DEFAULT_NEAR, i))
        .collect();

    let mut hits: Vec<(f64, usize, f64)> = Vec::with_capacity(splats.len());
    for v in 0..cam.height {
        for u in 0..cam.width {
            let (px, py) = pixel_center(u, v);
            hits.clear();
            for s in &splats {
                let dx = px - s.mean2d.x;
                let dy = py - s.mean2d.y;
                let [a, b, c] = s.conic;
                let m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
                if !(m <= FOOTPRINT_MAHALANOBIS_SQ) {
                    continue;
                }
                let alpha = (s.alpha_max * (-0.5 * m).exp()).min(ALPHA_CLAMP);
                if alpha >= ALPHA_SKIP {
                    hits.push((s.depth, s.source_index, alpha));
                }
            }
            hits.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));

            let pixel = v as usize * cam.width as usize + u as usize;
            let acc = &mut out.feature_map[pixel * dim..(pixel + 1) * dim];
            let mut t = 1.0;
            let mut count = 0;
            for &(_, src, alpha) in &hits {
                let w = t * alpha;
                for (a, f) in acc.iter_mut().zip(&scene.gaussians[src].feature) {
                    *a += w * f;
                }
                t *= 1.0 - alpha;
                count += 1;
                if t < TRANSMITTANCE_STOP {
                    break;
                }
            }
            out.transmittance_map[pixel] = t;
            out.contributor_counts[pixel] = count;
        }
    }
    out
}

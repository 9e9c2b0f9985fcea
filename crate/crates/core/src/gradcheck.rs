//! Central finite-difference check of the full training objective.
//!
//! Every learnable scalar is nudged by `±h`, the loss is re-evaluated and the slope is
//! compared with the analytic gradient from [`evaluate_view`]. Because the blend has
//! hard cutoffs (footprint, skip threshold, clamp, early stop), a probe is only valid
//! when the set of contributing splats at every pixel is the same at `x`, `x + h` and
//! `x − h`. Probes that change it are retried with a smaller step and otherwise counted
//! as skipped.

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::dataset::{Split, View};
use crate::decoder::{Decoder, DecoderGradients, EmbeddingConfig};
use crate::error::Result;
use crate::img::Image;
use crate::loss::{LossConfig, IGNORE_LABEL};
use crate::raster::{blend_forward, SceneGradients};
use crate::scene::{logit, Gaussian3D, SplatScene};
use crate::trainer::evaluate_view;

/// Denominator floor of [`relative_error`].
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    Position,
    Rotation,
    LogScale,
    OpacityLogit,
    Feature,
    W1,
    B1,
    W2,
    B2,
}

impl ParamClass {
    pub const ALL: [ParamClass; 9] = [
        ParamClass::Position,
        ParamClass::Rotation,
        ParamClass::LogScale,
        ParamClass::OpacityLogit,
        ParamClass::Feature,
        ParamClass::W1,
        ParamClass::B1,
        ParamClass::W2,
        ParamClass::B2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Position => "position",
            ParamClass::Rotation => "rotation",
            ParamClass::LogScale => "log_scale",
            ParamClass::OpacityLogit => "opacity_logit",
            ParamClass::Feature => "feature",
            ParamClass::W1 => "W1",
            ParamClass::B1 => "b1",
            ParamClass::W2 => "W2",
            ParamClass::B2 => "b2",
        }
    }

    fn len(self, scene: &SplatScene, dec: &Decoder) -> usize {
        let n = scene.len();
        match self {
            ParamClass::Position | ParamClass::LogScale => 3 * n,
            ParamClass::Rotation => 4 * n,
            ParamClass::OpacityLogit => n,
            ParamClass::Feature => n * scene.feature_dim,
            ParamClass::W1 => dec.w1.len(),
            ParamClass::B1 => dec.b1.len(),
            ParamClass::W2 => dec.w2.len(),
            ParamClass::B2 => dec.b2.len(),
        }
    }

    fn value_mut<'a>(self, scene: &'a mut SplatScene, dec: &'a mut Decoder, i: usize) -> &'a mut f64 {
        let d = scene.feature_dim;
        let g = &mut scene.gaussians;
        match self {
            ParamClass::Position => &mut g[i / 3].position[i % 3],
            ParamClass::Rotation => &mut g[i / 4].rotation[i % 4],
            ParamClass::LogScale => &mut g[i / 3].log_scale[i % 3],
            ParamClass::OpacityLogit => &mut g[i].opacity_logit,
            ParamClass::Feature => &mut g[i / d].feature[i % d],
            ParamClass::W1 => &mut dec.w1[i],
            ParamClass::B1 => &mut dec.b1[i],
            ParamClass::W2 => &mut dec.w2[i],
            ParamClass::B2 => &mut dec.b2[i],
        }
    }

    fn analytic(self, sg: &SceneGradients, dg: &DecoderGradients, i: usize) -> f64 {
        match self {
            ParamClass::Position => sg.position[i / 3][i % 3],
            ParamClass::Rotation => sg.rotation[i / 4][i % 4],
            ParamClass::LogScale => sg.log_scale[i / 3][i % 3],
            ParamClass::OpacityLogit => sg.opacity_logit[i],
            ParamClass::Feature => sg.feature[i],
            ParamClass::W1 => dg.w1[i],
            ParamClass::B1 => dg.b1[i],
            ParamClass::W2 => dg.w2[i],
            ParamClass::B2 => dg.b2[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class: ParamClass,
    pub checked: usize,
    /// Probes where the contributor structure changed even at the smallest step.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Entry with the largest error, with its analytic and numeric values.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub classes: Vec<ClassReport>,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.classes.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn skipped(&self) -> usize {
        self.classes.iter().map(|c| c.skipped).sum()
    }

    pub fn checked(&self) -> usize {
        self.classes.iter().map(|c| c.checked).sum()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.classes {
            write!(
                f,
                "{:<14} {:>5} checked {:>3} skipped  max rel err {:.3e}",
                c.class.name(),
                c.checked,
                c.skipped,
                c.max_rel_error
            )?;
            if let Some((i, a, n)) = c.worst {
                write!(f, "  (entry {i}: analytic {a:.6e}, numeric {n:.6e})")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Contributing Gaussians and clamp flags at every pixel.
fn structure(scene: &SplatScene, cam: &Camera) -> Vec<Vec<(usize, bool)>> {
    let render = blend_forward(scene, cam);
    let state = render.state.as_ref().expect("tiled render keeps its state");
    let mut out = Vec::with_capacity(cam.pixel_count());
    for v in 0..cam.height {
        for u in 0..cam.width {
            out.push(state.pixel_weights(u, v).iter().map(|w| (w.gaussian, w.clamped)).collect());
        }
    }
    out
}

/// Checks every learnable scalar of `scene` and `dec`. Steps start at `h` and shrink by
/// 10× up to three times when a probe changes the contributor structure.
pub fn check_gradients(
    scene: &SplatScene,
    dec: &Decoder,
    view: &View,
    loss_cfg: &LossConfig,
    background: &[f64; 3],
    h: f64,
) -> Result<GradCheckReport> {
    let base = evaluate_view(scene, dec, view, loss_cfg, background)?;
    let base_structure = structure(scene, &view.camera);
    let mut s = scene.clone();
    let mut d = dec.clone();
    let mut classes = Vec::new();
    for class in ParamClass::ALL {
        let mut report = ClassReport {
            class,
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        for i in 0..class.len(scene, dec) {
            let analytic = class.analytic(&base.scene_grads, &base.decoder_grads, i);
            let x0 = *class.value_mut(&mut s, &mut d, i);
            let mut numeric = None;
            let mut step = h;
            for _ in 0..4 {
                let mut loss_at = |x: f64| -> Result<(f64, bool)> {
                    *class.value_mut(&mut s, &mut d, i) = x;
                    let same = structure(&s, &view.camera) == base_structure;
                    let l = evaluate_view(&s, &d, view, loss_cfg, background)?.loss.total;
                    Ok((l, same))
                };
                let (lp, same_p) = loss_at(x0 + step)?;
                let (lm, same_m) = loss_at(x0 - step)?;
                if same_p && same_m {
                    numeric = Some((lp - lm) / (2.0 * step));
                    break;
                }
                step /= 10.0;
            }
            *class.value_mut(&mut s, &mut d, i) = x0;
            match numeric {
                Some(n) => {
                    report.checked += 1;
                    let e = relative_error(analytic, n);
                    if e > report.max_rel_error || report.worst.is_none() {
                        report.max_rel_error = report.max_rel_error.max(e);
                        report.worst = Some((i, analytic, n));
                    }
                }
                None => report.skipped += 1,
            }
        }
        classes.push(report);
    }
    Ok(GradCheckReport {
        classes,
        loss: base.loss.total,
    })
}

/// A small random problem: `n` Gaussians in front of a `size × size` camera, a random
/// target image and random labels (with some pixels ignored).
pub fn random_instance(
    n: usize,
    size: u32,
    feature_dim: usize,
    class_count: usize,
    seed: u64,
) -> Result<(SplatScene, Decoder, View)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = Camera::new(
        size as f64 * 1.2,
        size as f64 * 1.2,
        size as f64 / 2.0,
        size as f64 / 2.0,
        size,
        size,
        Matrix3::identity(),
        Vector3::new(0.0, 0.0, 4.0),
    )?;
    let gaussians = (0..n)
        .map(|k| {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            Gaussian3D {
                position: Vector3::new(
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-0.8..0.8),
                    // Distinct depths keep the sort order stable under small steps.
                    -1.0 + 2.0 * k as f64 / n as f64 + rng.random_range(0.0..0.1),
                ),
                rotation: q,
                log_scale: Vector3::from_fn(|_, _| rng.random_range(0.15f64..0.5).ln()),
                opacity_logit: logit(rng.random_range(0.2..0.8)),
                feature: (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            }
        })
        .collect();
    let scene = SplatScene::new(gaussians, feature_dim, class_count)?;
    let dec = Decoder::random(feature_dim, EmbeddingConfig::ALL, class_count, &mut rng);
    let pixels = cam.pixel_count();
    let image = Image::new(size, size, 3, (0..pixels * 3).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let labels = (class_count > 0).then(|| {
        (0..pixels)
            .map(|_| {
                if rng.random_bool(0.1) {
                    IGNORE_LABEL
                } else {
                    rng.random_range(0..class_count as u32)
                }
            })
            .collect()
    });
    let view = View {
        name: "gradcheck".into(),
        camera: cam,
        image,
        labels,
        split: Split::Train,
    };
    Ok((scene, dec, view))
}

//! Photometric and semantic training losses with their gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Label value excluded from the cross-entropy and from mIoU.
pub const IGNORE_LABEL: u32 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_ssim: f64,
    pub lambda_sem: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_ssim: 0.2,
            lambda_sem: 0.001,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_ssim) || !(self.lambda_sem >= 0.0) || !self.lambda_sem.is_finite() {
            return Err(Error::InvalidInput(format!(
                "loss weights out of range: lambda_ssim={} lambda_sem={}",
                self.lambda_ssim, self.lambda_sem
            )));
        }
        Ok(())
    }
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_loss(pred: &Image, target: &Image) -> Result<f64> {
    pred.check_same_shape(target)?;
    let sum: f64 = pred.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / pred.data.len() as f64)
}

fn l1_grad(pred: &Image, target: &Image, scale: f64, out: &mut [f64]) {
    let k = scale / pred.data.len() as f64;
    for ((o, a), b) in out.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = a - b;
        if d > 0.0 {
            *o += k;
        } else if d < 0.0 {
            *o -= k;
        }
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mirror index without repeating the edge sample (`-1 → 1`, `n → n-2`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Same-size separable blur of a single-channel `h × w` plane with reflected borders.
struct Blur {
    w: usize,
    h: usize,
    taps: [f64; SSIM_WINDOW],
    /// `idx_x[u * 11 + k]` is the source column for output column `u`, tap `k`.
    idx_x: Vec<usize>,
    idx_y: Vec<usize>,
}

impl Blur {
    fn new(w: usize, h: usize) -> Self {
        let r = (SSIM_WINDOW / 2) as isize;
        let table = |n: usize| {
            (0..n)
                .flat_map(|i| (0..SSIM_WINDOW).map(move |k| reflect(i as isize + k as isize - r, n)))
                .collect()
        };
        Blur {
            w,
            h,
            taps: gaussian_window(),
            idx_x: table(w),
            idx_y: table(h),
        }
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0.0; w * h];
        for v in 0..h {
            let row = &src[v * w..(v + 1) * w];
            for u in 0..w {
                let idx = &self.idx_x[u * SSIM_WINDOW..(u + 1) * SSIM_WINDOW];
                tmp[v * w + u] = idx.iter().zip(&self.taps).map(|(&i, t)| t * row[i]).sum();
            }
        }
        let mut out = vec![0.0; w * h];
        for v in 0..h {
            let idx = &self.idx_y[v * SSIM_WINDOW..(v + 1) * SSIM_WINDOW];
            for u in 0..w {
                out[v * w + u] = idx.iter().zip(&self.taps).map(|(&i, t)| t * tmp[i * w + u]).sum();
            }
        }
        out
    }

    /// Adjoint of [`Blur::apply`].
    fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0.0; w * h];
        for v in 0..h {
            let idx = &self.idx_y[v * SSIM_WINDOW..(v + 1) * SSIM_WINDOW];
            for u in 0..w {
                let gv = g[v * w + u];
                for (&i, t) in idx.iter().zip(&self.taps) {
                    tmp[i * w + u] += t * gv;
                }
            }
        }
        let mut out = vec![0.0; w * h];
        for v in 0..h {
            for u in 0..w {
                let gv = tmp[v * w + u];
                let idx = &self.idx_x[u * SSIM_WINDOW..(u + 1) * SSIM_WINDOW];
                for (&i, t) in idx.iter().zip(&self.taps) {
                    out[v * w + i] += t * gv;
                }
            }
        }
        out
    }
}

fn channel_plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

/// Mean SSIM over pixels and channels and, when requested, its gradient with
/// respect to `x` (same layout as `x.data`).
fn ssim_impl(x: &Image, y: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    x.check_same_shape(y)?;
    let (w, h) = (x.width as usize, x.height as usize);
    let n = w * h;
    if n == 0 || x.channels == 0 {
        return Err(Error::InvalidInput("SSIM of an empty image".into()));
    }
    let blur = Blur::new(w, h);
    let norm = 1.0 / (n * x.channels) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; x.data.len()]);

    for c in 0..x.channels {
        let xp = channel_plane(x, c);
        let yp = channel_plane(y, c);
        let mx = blur.apply(&xp);
        let my = blur.apply(&yp);
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let exx = blur.apply(&sq(&xp, &xp));
        let eyy = blur.apply(&sq(&yp, &yp));
        let exy = blur.apply(&sq(&xp, &yp));

        let mut d_mx = vec![0.0; n];
        let mut d_exx = vec![0.0; n];
        let mut d_exy = vec![0.0; n];
        for i in 0..n {
            let (a, b) = (mx[i], my[i]);
            let num1 = 2.0 * a * b + SSIM_C1;
            let num2 = 2.0 * (exy[i] - a * b) + SSIM_C2;
            let den1 = a * a + b * b + SSIM_C1;
            let den2 = (exx[i] - a * a) + (eyy[i] - b * b) + SSIM_C2;
            let s = num1 * num2 / (den1 * den2);
            total += s;
            if want_grad {
                d_mx[i] = norm
                    * (2.0 * b * (num2 - num1) / (den1 * den2) - 2.0 * a * s / den1 + 2.0 * a * s / den2);
                d_exx[i] = -norm * s / den2;
                d_exy[i] = norm * 2.0 * num1 / (den1 * den2);
            }
        }
        if let Some(g) = grad.as_mut() {
            let ga = blur.apply_transpose(&d_mx);
            let gxx = blur.apply_transpose(&d_exx);
            let gxy = blur.apply_transpose(&d_exy);
            for i in 0..n {
                g[i * x.channels + c] = ga[i] + 2.0 * xp[i] * gxx[i] + yp[i] * gxy[i];
            }
        }
    }
    Ok((total * norm, grad))
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, reflected borders), averaged over channels.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    Ok(ssim_impl(x, y, false)?.0)
}

/// `(1 − SSIM) / 2`.
pub fn dssim_loss(pred: &Image, target: &Image) -> Result<f64> {
    Ok((1.0 - ssim(pred, target)?) / 2.0)
}

/// D-SSIM and its gradient with respect to `pred`.
pub fn dssim_loss_grad(pred: &Image, target: &Image) -> Result<(f64, Vec<f64>)> {
    let (s, g) = ssim_impl(pred, target, true)?;
    let g = g.unwrap_or_default().into_iter().map(|v| -0.5 * v).collect();
    Ok(((1.0 - s) / 2.0, g))
}

fn check_labels(logits: &[f64], labels: &[u32], class_count: usize, ignore_id: u32) -> Result<()> {
    if class_count == 0 || logits.len() != labels.len() * class_count {
        return Err(Error::InvalidInput(format!(
            "{} logits for {} labels and {class_count} classes",
            logits.len(),
            labels.len()
        )));
    }
    if let Some((i, l)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l != ignore_id && l as usize >= class_count)
    {
        return Err(Error::InvalidInput(format!(
            "label {l} at pixel {i} is not a class id (C = {class_count})"
        )));
    }
    Ok(())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy over pixels whose label is not `ignore_id`. Zero when every
/// pixel is ignored.
pub fn ce_loss(logits: &[f64], labels: &[u32], class_count: usize, ignore_id: u32) -> Result<f64> {
    ce_impl(logits, labels, class_count, ignore_id, None)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn ce_loss_grad(logits: &[f64], labels: &[u32], class_count: usize, ignore_id: u32) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; logits.len()];
    let loss = ce_impl(logits, labels, class_count, ignore_id, Some((1.0, &mut g)))?;
    Ok((loss, g))
}

fn ce_impl(
    logits: &[f64],
    labels: &[u32],
    class_count: usize,
    ignore_id: u32,
    grad: Option<(f64, &mut [f64])>,
) -> Result<f64> {
    check_labels(logits, labels, class_count, ignore_id)?;
    let counted = labels.iter().filter(|&&l| l != ignore_id).count();
    if counted == 0 {
        return Ok(0.0);
    }
    let inv = 1.0 / counted as f64;
    let mut sum = 0.0;
    let mut grad = grad;
    for (p, &l) in labels.iter().enumerate() {
        if l == ignore_id {
            continue;
        }
        let row = &logits[p * class_count..(p + 1) * class_count];
        let lse = log_sum_exp(row);
        sum += lse - row[l as usize];
        if let Some((scale, g)) = grad.as_mut() {
            let k = *scale * inv;
            let grow = &mut g[p * class_count..(p + 1) * class_count];
            for (gi, &li) in grow.iter_mut().zip(row) {
                *gi += k * (li - lse).exp();
            }
            grow[l as usize] -= k;
        }
    }
    Ok(sum * inv)
}

/// Semantic targets for [`total_loss`].
#[derive(Debug, Clone, Copy)]
pub struct SemanticTarget<'a> {
    /// `H × W × C` raw logits.
    pub logits: &'a [f64],
    pub labels: &'a [u32],
    pub class_count: usize,
    pub ignore_id: u32,
}

/// Value and gradients of the weighted training objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub ce: f64,
    /// Gradient with respect to the predicted image.
    pub d_image: Vec<f64>,
    /// Gradient with respect to the semantic logits, when a semantic target was given.
    pub d_logits: Option<Vec<f64>>,
}

/// `(1 − λ)·L1 + λ·D-SSIM + λ_sem·CE`. Without a semantic target the last term is absent.
pub fn total_loss(
    pred: &Image,
    target: &Image,
    semantic: Option<SemanticTarget<'_>>,
    cfg: &LossConfig,
) -> Result<LossValue> {
    cfg.validate()?;
    pred.check_same_shape(target)?;
    let lam = cfg.lambda_ssim;
    let l1 = l1_loss(pred, target)?;
    let mut d_image = vec![0.0; pred.data.len()];
    l1_grad(pred, target, 1.0 - lam, &mut d_image);
    let (dssim, d_ssim) = dssim_loss_grad(pred, target)?;
    for (d, g) in d_image.iter_mut().zip(&d_ssim) {
        *d += lam * g;
    }
    let mut total = (1.0 - lam) * l1 + lam * dssim;
    let (ce, d_logits) = match semantic {
        Some(s) => {
            if s.labels.len() != pred.pixel_count() {
                return Err(Error::InvalidInput("label map size does not match image".into()));
            }
            let mut g = vec![0.0; s.logits.len()];
            let ce = ce_impl(s.logits, s.labels, s.class_count, s.ignore_id, Some((cfg.lambda_sem, &mut g)))?;
            total += cfg.lambda_sem * ce;
            (ce, Some(g))
        }
        None => (0.0, None),
    };
    Ok(LossValue {
        total,
        l1,
        dssim,
        ce,
        d_image,
        d_logits,
    })
}

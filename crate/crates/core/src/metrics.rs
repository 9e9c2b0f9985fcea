//! Evaluation metrics.

use crate::error::{Error, Result};
use crate::img::Image;
use crate::loss::IGNORE_LABEL;

pub use crate::loss::ssim as ssim_metric;

/// PSNR reported when the error is numerically zero.
pub const PSNR_CAP: f64 = 100.0;

pub fn mse(pred: &Image, target: &Image) -> Result<f64> {
    pred.check_same_shape(target)?;
    let sum: f64 = pred.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.data.len() as f64)
}

/// `10·log10(1 / mse)` for images in `[0, 1]`, capped at 100 dB below `mse = 1e-10`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(pred: &Image, target: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?))
}

/// Support-weighted mean IoU: `Σ_c n_c·IoU_c / Σ_c n_c` with `n_c` the ground-truth pixel
/// count of class `c`. Classes absent from both maps drop out; pixels labelled
/// [`IGNORE_LABEL`] in the ground truth are skipped.
pub fn weighted_miou(pred: &[u32], gt: &[u32], class_count: usize) -> Result<f64> {
    let m = ConfusionMatrix::from_labels(pred, gt, class_count)?;
    m.weighted_miou()
}

/// `confusion[g * C + p]` counts pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub class_count: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        ConfusionMatrix {
            class_count,
            counts: vec![0; class_count * class_count],
        }
    }

    pub fn from_labels(pred: &[u32], gt: &[u32], class_count: usize) -> Result<Self> {
        let mut m = ConfusionMatrix::new(class_count);
        m.add(pred, gt)?;
        Ok(m)
    }

    /// Accumulates another label map pair, so several views can share one matrix.
    pub fn add(&mut self, pred: &[u32], gt: &[u32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::InvalidInput(format!(
                "label maps differ in size: {} vs {}",
                pred.len(),
                gt.len()
            )));
        }
        let c = self.class_count;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            if p as usize >= c || g as usize >= c {
                return Err(Error::InvalidInput(format!("label out of range for {c} classes")));
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn iou(&self, class: usize) -> Option<f64> {
        let c = self.class_count;
        let tp = self.counts[class * c + class];
        let gt: u64 = self.counts[class * c..(class + 1) * c].iter().sum();
        let pred: u64 = (0..c).map(|g| self.counts[g * c + class]).sum();
        let union = gt + pred - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn weighted_miou(&self) -> Result<f64> {
        let c = self.class_count;
        let mut num = 0.0;
        let mut den = 0.0;
        for class in 0..c {
            let support: u64 = self.counts[class * c..(class + 1) * c].iter().sum();
            if let Some(iou) = self.iou(class) {
                num += support as f64 * iou;
                den += support as f64;
            }
        }
        if den == 0.0 {
            return Err(Error::InvalidInput("no labelled pixels to score".into()));
        }
        Ok(num / den)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        assert_eq!(psnr_from_mse(0.01), 20.0);
        assert_eq!(psnr_from_mse(1.0), 0.0);
        assert_eq!(psnr_from_mse(0.0), PSNR_CAP);
        assert_eq!(psnr_from_mse(1e-11), PSNR_CAP);
        let a = Image::filled(4, 4, 3, 0.5);
        let b = Image::filled(4, 4, 3, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn miou_examples() {
        let labels = [0, 1, 1, 0, 2];
        assert_eq!(weighted_miou(&labels, &labels, 3).unwrap(), 1.0);

        // Class 0: 100 gt pixels, 50 correct, 50 predicted as 1 -> IoU 50/100.
        // Class 1: 300 gt pixels, all correct -> IoU 300/350.
        let mut gt = vec![0u32; 100];
        gt.extend(vec![1u32; 300]);
        let mut pred = vec![0u32; 50];
        pred.extend(vec![1u32; 350]);
        let expect = (100.0 * 0.5 + 300.0 * (300.0 / 350.0)) / 400.0;
        assert!((weighted_miou(&pred, &gt, 2).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn miou_hand_confusion() {
        // IoU 0.5 with support 100, IoU 1.0 with support 300.
        let mut m = ConfusionMatrix::new(3);
        m.counts[0] = 50; // gt 0 -> 0
        m.counts[2] = 50; // gt 0 -> 2, class 2 has no support
        m.counts[4] = 300; // gt 1 -> 1
        assert_eq!(m.iou(0), Some(0.5));
        assert_eq!(m.iou(1), Some(1.0));
        assert_eq!(m.weighted_miou().unwrap(), 0.875);
    }

    #[test]
    fn miou_skips_ignored_and_rejects_bad_input() {
        assert_eq!(weighted_miou(&[0, 1], &[0, IGNORE_LABEL], 2).unwrap(), 1.0);
        assert!(weighted_miou(&[0], &[0, 1], 2).is_err());
        assert!(weighted_miou(&[5], &[0], 2).is_err());
        assert!(weighted_miou(&[0], &[IGNORE_LABEL], 2).is_err());
    }
}

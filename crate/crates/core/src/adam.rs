//! Bias-corrected Adam over flat parameter buffers.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// Moment accumulators for one parameter tensor. Row-structured tensors (one row per
/// Gaussian) can be stepped sparsely and resized as Gaussians are added or removed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    /// Entries per row; 1 for dense tensors.
    pub row_width: usize,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState::with_rows(len, 1)
    }

    pub fn with_rows(rows: usize, row_width: usize) -> Self {
        AdamState {
            m: vec![0.0; rows * row_width],
            v: vec![0.0; rows * row_width],
            step: 0,
            row_width,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.m.len() / self.row_width
    }

    /// Advances the step counter and returns the bias corrections `(1 − β₁ᵗ, 1 − β₂ᵗ)`.
    pub fn begin_step(&mut self, cfg: &AdamConfig) -> (f64, f64) {
        self.step += 1;
        let t = self.step as i32;
        (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t))
    }

    /// Updates entries `offset..offset + params.len()` using corrections from
    /// [`AdamState::begin_step`].
    #[inline]
    pub fn update_slice(
        &mut self,
        offset: usize,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        bias: (f64, f64),
        cfg: &AdamConfig,
    ) {
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m).zip(v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bias.0;
            let v_hat = *v / bias.1;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }

    /// Keeps the rows whose flag is set.
    pub fn retain_rows(&mut self, keep: &[bool]) {
        let w = self.row_width;
        let filter = |buf: &mut Vec<f64>| {
            let kept: Vec<f64> = buf
                .chunks_exact(w)
                .zip(keep)
                .filter(|(_, &k)| k)
                .flat_map(|(row, _)| row.iter().copied())
                .collect();
            *buf = kept;
        };
        filter(&mut self.m);
        filter(&mut self.v);
    }

    /// Appends zero-initialized rows.
    pub fn push_rows(&mut self, count: usize) {
        let n = self.m.len() + count * self.row_width;
        self.m.resize(n, 0.0);
        self.v.resize(n, 0.0);
    }

    /// Zeroes the moments of every row.
    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// One dense Adam step on `params`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::Contract(format!(
            "adam shapes differ: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    let bias = state.begin_step(cfg);
    state.update_slice(0, params, grads, lr, bias, cfg);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, -2.0, 0.5];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.3, -7.0, 1e-4], &mut s, 0.01, &cfg).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-12);
        assert!((p[1] + 1.99).abs() < 1e-12);
        assert!((p[2] - 0.49).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.5, -0.25];
        let mut s = AdamState::new(2);
        for _ in 0..50 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, &cfg).unwrap();
        }
        assert_eq!(p, vec![1.5, -0.25]);
    }

    #[test]
    fn quadratic_matches_scalar_oracle() {
        // f(x) = (x - 3)^2, gradient 2(x - 3).
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let cfg = AdamConfig {
            beta1: b1,
            beta2: b2,
            eps,
        };
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            let g = [2.0 * (p[0] - 3.0)];
            adam_step(&mut p, &g, &mut s, lr, &cfg).unwrap();
            assert!((p[0] - x).abs() < 1e-12, "step {t}");
        }
    }

    #[test]
    fn zero_lr_is_bitwise_noop() {
        let mut p = vec![0.1234567, -9.87];
        let before = p.clone();
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[3.0, -1.0], &mut s, 0.0, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn rows_follow_parameters() {
        let mut s = AdamState::with_rows(3, 2);
        s.m = vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        s.v = s.m.clone();
        s.retain_rows(&[true, false, true]);
        assert_eq!(s.m, vec![1.0, 1.0, 3.0, 3.0]);
        s.push_rows(2);
        assert_eq!(s.rows(), 4);
        assert_eq!(&s.v[4..], &[0.0; 4]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut s = AdamState::new(2);
        assert!(adam_step(&mut [0.0; 3], &[0.0; 3], &mut s, 0.1, &AdamConfig::default()).is_err());
    }
}

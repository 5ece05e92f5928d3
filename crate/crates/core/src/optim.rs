//! Adam and the single-cycle cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// `lr0 · (1 + cos(π t / steps)) / 2`.
pub fn cosine_lr(t: usize, steps: usize, lr0: f64) -> f64 {
    if steps == 0 {
        return lr0;
    }
    let frac = (t.min(steps)) as f64 / steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.m, &self.v)
    }

    /// One update in place. A non-finite gradient entry aborts without
    /// touching the parameters or the state.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) -> Result<()> {
        if params.len() != grads.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training {
                step: self.t as usize + 1,
                reason: format!("non-finite gradient at parameter {i}"),
            });
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let c1 = T::one() - b1.powi(self.t as i32);
        let c2 = T::one() - b2.powi(self.t as i32);
        let eps = T::lit(self.cfg.eps);
        let lr = T::lit(lr);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Rescales `grads` so its L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [T], max_norm: f64) -> T {
    let norm = grads.iter().map(|&g| g * g).sum::<T>().sqrt();
    let max = T::lit(max_norm);
    if norm > max {
        let s = max / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

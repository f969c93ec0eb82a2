//! Optimizers over flat lists of tensors.

use autodiff::Tensor;

use crate::error::{DiffLmError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with decoupled weight decay. Moments are kept per tensor and are
/// part of the checkpointed trainer state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &[&Tensor]) -> Self {
        let zeros = |t: &&Tensor| Tensor::zeros(t.shape());
        AdamW { config, m: shapes.iter().map(zeros).collect(), v: shapes.iter().map(zeros).collect(), t: 0 }
    }

    /// One update at learning rate `lr`. `decay[i]` says whether tensor `i`
    /// receives weight decay.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64, decay: &[bool]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || decay.len() != self.m.len() {
            return Err(DiffLmError::ShapeMismatch("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            if g.len() != p.len() {
                return Err(DiffLmError::ShapeMismatch(format!("gradient {i} has {} entries for {}", g.len(), p.len())));
            }
            let wd = if decay[i] { c.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + c.eps) + wd * *x);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient list.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Adagrad ascent on a single vector: `x += lr * g / sqrt(acc + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adagrad {
    pub lr: f64,
    pub eps: f64,
    acc: Vec<f64>,
}

impl Adagrad {
    pub fn new(lr: f64, len: usize) -> Self {
        Adagrad { lr, eps: 1e-10, acc: vec![0.0; len] }
    }

    pub fn ascend(&mut self, x: &mut [f64], g: &[f64]) {
        for ((xi, gi), a) in x.iter_mut().zip(g).zip(self.acc.iter_mut()) {
            *a += gi * gi;
            *xi += self.lr * gi / (*a + self.eps).sqrt();
        }
    }
}

/// Rounds every entry to the nearest `f32`, emulating 32-bit storage.
pub fn round_to_f32(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // With bias correction the first step is lr * sign(g) (plus decay).
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::new(vec![3], vec![0.3, -4.0, 0.0]).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &[&p]);
        opt.step(&mut [&mut p], &[g], 0.1, &[true]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn weight_decay_shrinks_toward_zero() {
        let mut p = Tensor::new(vec![1], vec![2.0]).unwrap();
        let g = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[&p]);
        opt.step(&mut [&mut p], &[g], 0.5, &[true]).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.5 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut p = Tensor::new(vec![2], vec![3.0, -1.0]).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &[&p]);
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * (x - 0.5));
            opt.step(&mut [&mut p], &[g], 0.01, &[false]).unwrap();
        }
        assert!(p.data().iter().all(|x| (x - 0.5).abs() < 1e-3));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![Tensor::new(vec![1], vec![0.5]).unwrap()];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].data()[0], 0.5);
    }

    #[test]
    fn adagrad_first_step_is_lr_times_sign() {
        let mut x = vec![0.0, 0.0];
        let mut opt = Adagrad::new(0.1, 2);
        opt.ascend(&mut x, &[2.0, -0.5]);
        assert!((x[0] - 0.1).abs() < 1e-9 && (x[1] + 0.1).abs() < 1e-9);
    }

    #[test]
    fn f32_rounding_is_idempotent() {
        let mut t = Tensor::new(vec![2], vec![0.1, 1.0 / 3.0]).unwrap();
        round_to_f32(&mut t);
        let once = t.clone();
        round_to_f32(&mut t);
        assert_eq!(t, once);
        assert_ne!(t.data()[0], 0.1);
    }
}

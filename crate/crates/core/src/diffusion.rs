//! Closed-form Gaussian diffusion quantities.

use autodiff::Tensor;
use rand::Rng;

use crate::error::{DiffLmError, Result};
use crate::rng::normal;
use crate::schedule::Schedule;

/// Coefficients of the posterior `q(x_{t-1} | x_0, x_t)`:
/// mean `c0 * x0 + ct * xt`, variance `var`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoeffs {
    pub c0: f64,
    pub ct: f64,
    pub var: f64,
}

impl PosteriorCoeffs {
    pub fn mean(&self, x0: &Tensor, xt: &Tensor) -> Result<Tensor> {
        same_shape(x0, xt)?;
        let data = x0.data().iter().zip(xt.data()).map(|(a, b)| self.c0 * a + self.ct * b).collect();
        Ok(Tensor::new(x0.shape().to_vec(), data)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conversion {
    EpsToX0,
    X0ToEps,
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DiffLmError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps` with the given noise.
pub fn forward_marginal(sched: &Schedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    sched.check_step(t, 0)?;
    same_shape(x0, eps)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// Draws `x_t ~ q(x_t | x_0)`.
pub fn forward_marginal_sample(sched: &Schedule, x0: &Tensor, t: usize, rng: &mut impl Rng) -> Result<Tensor> {
    sched.check_step(t, 1)?;
    let eps = Tensor::new(x0.shape().to_vec(), (0..x0.len()).map(|_| normal(rng)).collect())?;
    forward_marginal(sched, x0, t, &eps)
}

/// One forward transition `q(x_t | x_{t-1})`.
pub fn forward_step_sample(sched: &Schedule, prev: &Tensor, t: usize, rng: &mut impl Rng) -> Result<Tensor> {
    sched.check_step(t, 1)?;
    let b = sched.beta(t);
    let (a, s) = ((1.0 - b).sqrt(), b.sqrt());
    Ok(prev.map(|x| a * x + s * normal(rng)))
}

pub fn posterior_coeffs(sched: &Schedule, t: usize) -> Result<PosteriorCoeffs> {
    sched.check_step(t, 2)?;
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let beta = sched.beta(t);
    let denom = 1.0 - ab_t;
    if denom < 1e-12 {
        return Err(DiffLmError::DegenerateStep { step: t, detail: "1 - alpha_bar_t below 1e-12".into() });
    }
    Ok(PosteriorCoeffs {
        c0: ab_prev.sqrt() * beta / denom,
        ct: (1.0 - beta).sqrt() * (1.0 - ab_prev) / denom,
        var: beta * (1.0 - ab_prev) / denom,
    })
}

/// Posterior mean with a predicted `x0`.
pub fn mu_from_x0(sched: &Schedule, x0hat: &Tensor, xt: &Tensor, t: usize) -> Result<Tensor> {
    posterior_coeffs(sched, t)?.mean(x0hat, xt)
}

/// Converts between an `eps` prediction and an `x0` prediction at step `t`.
pub fn eps_x0_convert(sched: &Schedule, value: &Tensor, xt: &Tensor, t: usize, dir: Conversion) -> Result<Tensor> {
    sched.check_step(t, 1)?;
    same_shape(value, xt)?;
    let ab = sched.alpha_bar(t);
    if ab <= 0.0 || ab >= 1.0 {
        return Err(DiffLmError::DegenerateStep { step: t, detail: format!("alpha_bar_t = {ab}") });
    }
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = value
        .data()
        .iter()
        .zip(xt.data())
        .map(|(&v, &x)| match dir {
            Conversion::EpsToX0 => (x - sn * v) / sa,
            Conversion::X0ToEps => (x - sa * v) / sn,
        })
        .collect();
    Ok(Tensor::new(value.shape().to_vec(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_inputs_have_zero_mean() {
        let s = Schedule::sqrt(100).unwrap();
        let z = Tensor::zeros(&[2, 3]);
        let m = mu_from_x0(&s, &z, &z, 50).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_one_is_rejected() {
        let s = Schedule::sqrt(100).unwrap();
        assert!(matches!(posterior_coeffs(&s, 1), Err(DiffLmError::StepOutOfRange { .. })));
        assert!(posterior_coeffs(&s, 101).is_err());
    }

    #[test]
    fn conversion_degenerate_at_end() {
        let s = Schedule::sqrt(100).unwrap();
        let z = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            eps_x0_convert(&s, &z, &z, 100, Conversion::EpsToX0),
            Err(DiffLmError::DegenerateStep { .. })
        ));
    }

    #[test]
    fn zero_eps_rescales() {
        let s = Schedule::sqrt(100).unwrap();
        let xt = Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap();
        let x0 = eps_x0_convert(&s, &Tensor::zeros(&[1, 2]), &xt, 10, Conversion::EpsToX0).unwrap();
        let sa = s.alpha_bar(10).sqrt();
        assert!((x0.data()[0] - 1.0 / sa).abs() < 1e-12);
        assert!((x0.data()[1] + 2.0 / sa).abs() < 1e-12);
    }

    #[test]
    fn marginal_at_full_signal_is_identity() {
        let s = Schedule::sqrt(100).unwrap();
        let x0 = Tensor::matrix(1, 3, vec![0.5, 1.0, -1.0]).unwrap();
        let out = forward_marginal(&s, &x0, 0, &Tensor::filled(&[1, 3], 7.0)).unwrap();
        assert_eq!(out, x0);
        let mut rng = seeded(0);
        assert!(forward_marginal_sample(&s, &x0, 0, &mut rng).is_err());
    }
}

//! Gradient guidance of `x_{t-1}`: a few Adagrad ascent steps on
//! `lambda * log p(x_{t-1} | x_t) + sum_c log p(c | x_{t-1})`, with the
//! model and classifiers frozen.

use autodiff::Tensor;

use super::classifier::{Label, LatentClassifier};
use crate::denoiser::Denoise;
use crate::diffusion::posterior_coeffs;
use crate::embedding::EmbeddingTable;
use crate::error::{DiffLmError, Result};
use crate::optim::Adagrad;
use crate::rng::DiffRng;
use crate::sampler::{generate_with, reverse_step, step_x0, ResampleMode, SampleConfig, Samples, StepHook, StepState};
use crate::schedule::Schedule;

/// A differentiable control score over packed latents.
pub trait Guide {
    /// `sum over sequences of log p(c | x)` at model step `step`, and its
    /// gradient with respect to `x`.
    fn log_prob_grad(&self, x: &Tensor, step: usize, seq_len: usize) -> Result<(f64, Tensor)>;
}

/// A classifier with the same label for every sequence of the batch.
pub struct ClassifierGuide<'a> {
    pub classifier: &'a LatentClassifier,
    pub label: Label,
}

impl Guide for ClassifierGuide<'_> {
    fn log_prob_grad(&self, x: &Tensor, step: usize, seq_len: usize) -> Result<(f64, Tensor)> {
        let b = x.rows() / seq_len;
        self.classifier.log_prob_grad(x, &vec![step; b], &vec![self.label.clone(); b])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    /// Weight of the fluency term.
    pub lambda: f64,
    /// Adagrad updates per reverse step; 0 disables guidance.
    pub inner_steps: usize,
    pub lr: f64,
    /// Downsampling stride of the sampling grid.
    pub stride: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { lambda: 0.01, inner_steps: 3, lr: 0.1, stride: 10 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(DiffLmError::InvalidParams(format!("lambda {} must be nonnegative", self.lambda)));
        }
        if !(self.lr > 0.0) || self.stride == 0 {
            return Err(DiffLmError::InvalidParams("guidance lr and stride must be positive".into()));
        }
        Ok(())
    }
}

/// Objective value before and after one inner update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentRecord {
    pub t: usize,
    pub before: f64,
    pub after: f64,
}

/// The fluency Gaussian `N(mean, var I)` that `x_{t-1}` was drawn from.
fn fluency(sched: &Schedule, t: usize, xt: &Tensor, x0hat: &Tensor, mode: ResampleMode) -> Result<(Tensor, f64)> {
    match mode {
        ResampleMode::Posterior => {
            let pc = posterior_coeffs(sched, t)?;
            Ok((pc.mean(x0hat, xt)?, pc.var))
        }
        ResampleMode::MarginalAnchor => {
            let ab = sched.alpha_bar(t - 1);
            Ok((x0hat.map(|v| ab.sqrt() * v), 1.0 - ab))
        }
    }
}

/// Guidance objective `lambda * log N(x; mean, var I) + sum_c log p(c | x)`
/// (up to constants) and its gradient at `x`.
pub fn objective(
    guides: &[&dyn Guide],
    lambda: f64,
    mean: &Tensor,
    var: f64,
    x: &Tensor,
    step: usize,
    seq_len: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut value = 0.0;
    let mut grad = vec![0.0; x.len()];
    if lambda > 0.0 {
        for ((g, xi), mi) in grad.iter_mut().zip(x.data()).zip(mean.data()) {
            let r = xi - mi;
            value -= lambda * r * r / (2.0 * var);
            *g -= lambda * r / var;
        }
    }
    for guide in guides {
        let (v, g) = guide.log_prob_grad(x, step, seq_len)?;
        value += v;
        grad.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
    }
    Ok((value, grad))
}

/// Runs the inner ascent on `x` (the unguided draw of `x_{t-1}`). Skipped
/// at `t = 1`, where the fluency Gaussian has zero variance.
#[allow(clippy::too_many_arguments)]
pub fn guide_latent(
    guides: &[&dyn Guide],
    cfg: &GuidanceConfig,
    sched: &Schedule,
    t: usize,
    xt: &Tensor,
    x0hat: &Tensor,
    x: &mut Tensor,
    mode: ResampleMode,
    seq_len: usize,
    mut trace: Option<&mut Vec<AscentRecord>>,
) -> Result<()> {
    if cfg.inner_steps == 0 || t <= 1 {
        return Ok(());
    }
    let (mean, var) = fluency(sched, t, xt, x0hat, mode)?;
    if var <= 0.0 {
        return Ok(());
    }
    let step = sched.model_step(t - 1);
    let mut opt = Adagrad::new(cfg.lr, x.len());
    let (mut value, mut grad) = objective(guides, cfg.lambda, &mean, var, x, step, seq_len)?;
    for i in 0..cfg.inner_steps {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(DiffLmError::NonFiniteGradient { step: t });
        }
        opt.ascend(x.data_mut(), &grad);
        let last = i + 1 == cfg.inner_steps;
        if !last || trace.is_some() {
            let before = value;
            (value, grad) = objective(guides, cfg.lambda, &mean, var, x, step, seq_len)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(AscentRecord { t, before, after: value });
            }
        }
    }
    if !x.all_finite() {
        return Err(DiffLmError::NonFiniteGradient { step: t });
    }
    Ok(())
}

/// An unguided reverse step followed by guidance of the draw.
#[allow(clippy::too_many_arguments)]
pub fn guided_reverse_step(
    model: &dyn Denoise,
    table: &EmbeddingTable,
    sched: &Schedule,
    guides: &[&dyn Guide],
    xt: &Tensor,
    t: usize,
    sample: &SampleConfig,
    cfg: &GuidanceConfig,
    rngs: &mut [DiffRng],
) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.inner_steps == 0 {
        return reverse_step(model, table, sched, xt, t, sample, rngs);
    }
    let x0hat = step_x0(model, table, sched, xt, t, sample.clamp)?;
    let mut x = crate::sampler::resample(sched, xt, &x0hat, t, sample, rngs)?;
    guide_latent(guides, cfg, sched, t, xt, &x0hat, &mut x, sample.resample, model.seq_len(), None)?;
    Ok(x)
}

/// [`StepHook`] running the guidance after every unguided draw.
pub struct GuidanceHook<'a> {
    pub guides: Vec<&'a dyn Guide>,
    pub cfg: GuidanceConfig,
    pub resample: ResampleMode,
    pub seq_len: usize,
    /// Collects every inner update when set.
    pub trace: Option<Vec<AscentRecord>>,
}

impl StepHook for GuidanceHook<'_> {
    fn after_step(&mut self, state: &StepState<'_>, x_prev: &mut Tensor, _: &mut [DiffRng]) -> Result<()> {
        guide_latent(
            &self.guides,
            &self.cfg,
            state.sched,
            state.t,
            state.xt,
            state.x0hat,
            x_prev,
            self.resample,
            self.seq_len,
            self.trace.as_mut(),
        )
    }
}

/// Runs hooks in order.
pub struct Chain<'a>(pub Vec<&'a mut dyn StepHook>);

impl StepHook for Chain<'_> {
    fn after_step(&mut self, state: &StepState<'_>, x_prev: &mut Tensor, rngs: &mut [DiffRng]) -> Result<()> {
        for h in self.0.iter_mut() {
            h.after_step(state, x_prev, rngs)?;
        }
        Ok(())
    }
}

/// The full guided chain over `sched` (already downsampled by the caller).
pub fn guided_generate(
    model: &dyn Denoise,
    table: &EmbeddingTable,
    sched: &Schedule,
    guides: &[&dyn Guide],
    sample: &SampleConfig,
    cfg: &GuidanceConfig,
    k: usize,
) -> Result<Samples> {
    cfg.validate()?;
    let mut hook = GuidanceHook { guides: guides.to_vec(), cfg: *cfg, resample: sample.resample, seq_len: model.seq_len(), trace: None };
    generate_with(model, table, sched, sample, k, &mut hook)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        m: Vec<f64>,
        s2: f64,
    }

    impl Guide for Quadratic {
        fn log_prob_grad(&self, x: &Tensor, _: usize, _: usize) -> Result<(f64, Tensor)> {
            let v = -x.data().iter().zip(&self.m).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * self.s2);
            Ok((v, Tensor::new(x.shape().to_vec(), x.data().iter().zip(&self.m).map(|(a, b)| (b - a) / self.s2).collect())?))
        }
    }

    #[test]
    fn objective_adds_fluency_and_control() {
        let q = Quadratic { m: vec![1.0, 2.0], s2: 0.5 };
        let mean = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let (v, g) = objective(&[&q], 2.0, &mean, 0.25, &x, 3, 1).unwrap();
        // -2 * 2 / 0.5 - 1 / 1
        assert!((v - (-8.0 - 1.0)).abs() < 1e-12);
        assert!((g[0] - (-8.0 + 0.0)).abs() < 1e-12);
        assert!((g[1] - (-8.0 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn config_checks() {
        assert!(GuidanceConfig { lambda: -1.0, ..GuidanceConfig::default() }.validate().is_err());
        assert!(GuidanceConfig { stride: 0, ..GuidanceConfig::default() }.validate().is_err());
        assert!(GuidanceConfig::default().validate().is_ok());
    }
}

//! Ancestral sampling with clamping, downsampled step grids and hooks for
//! guidance and anchoring.

use std::fmt;
use std::str::FromStr;

use autodiff::Tensor;

use crate::denoiser::{predict_x0, Denoise};
use crate::diffusion::posterior_coeffs;
use crate::embedding::{EmbeddingTable, TokenSeq};
use crate::error::{DiffLmError, Result};
use crate::rng::{derive, normal, stream, DiffRng};
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClampMode {
    Off,
    /// Clamp at every step `t <= t_clamp`.
    From(usize),
    Always,
}

impl ClampMode {
    pub fn active(self, t: usize) -> bool {
        match self {
            ClampMode::Off => false,
            ClampMode::From(tc) => t <= tc,
            ClampMode::Always => true,
        }
    }
}

impl fmt::Display for ClampMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClampMode::Off => f.write_str("off"),
            ClampMode::From(t) => write!(f, "from:{t}"),
            ClampMode::Always => f.write_str("always"),
        }
    }
}

impl FromStr for ClampMode {
    type Err = DiffLmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(ClampMode::Off),
            "always" => Ok(ClampMode::Always),
            _ => s
                .strip_prefix("from:")
                .and_then(|t| t.parse().ok())
                .map(ClampMode::From)
                .ok_or_else(|| DiffLmError::Parse(format!("clamp mode `{s}` (expected off, always or from:<t>)"))),
        }
    }
}

/// How `x_{t-1}` is drawn from the estimate `x0_hat`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    /// `q(x_{t-1} | x_t, x0_hat)`.
    Posterior,
    /// `N(sqrt(ab_{t-1}) x0_hat, (1 - ab_{t-1}) I)`, ignoring `x_t`.
    MarginalAnchor,
}

impl fmt::Display for ResampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResampleMode::Posterior => "posterior",
            ResampleMode::MarginalAnchor => "marginal",
        })
    }
}

impl FromStr for ResampleMode {
    type Err = DiffLmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posterior" => Ok(ResampleMode::Posterior),
            "marginal" => Ok(ResampleMode::MarginalAnchor),
            other => Err(DiffLmError::Parse(format!("resample mode `{other}` (expected posterior or marginal)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    pub clamp: ClampMode,
    pub resample: ResampleMode,
    pub seed: u64,
    pub batch_size: usize,
    /// Multiplies the injected noise; 0 gives the deterministic chain.
    pub noise_scale: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            clamp: ClampMode::Always,
            resample: ResampleMode::MarginalAnchor,
            seed: 0,
            batch_size: 64,
            noise_scale: 1.0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, sched: &Schedule) -> Result<()> {
        if let ClampMode::From(t) = self.clamp {
            sched.check_step(t, 1)?;
        }
        if self.batch_size == 0 {
            return Err(DiffLmError::InvalidParams("batch_size must be positive".into()));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(DiffLmError::InvalidParams("noise_scale must be nonnegative".into()));
        }
        Ok(())
    }
}

/// The state of one reverse step, handed to hooks after the unguided draw.
pub struct StepState<'a> {
    pub sched: &'a Schedule,
    pub t: usize,
    pub xt: &'a Tensor,
    /// The (possibly clamped) estimate of `x0`.
    pub x0hat: &'a Tensor,
    /// Index of the first sequence of this batch among all samples.
    pub offset: usize,
}

/// Modifies `x_{t-1}` after each reverse step (guidance, anchoring).
pub trait StepHook {
    fn after_step(&mut self, state: &StepState<'_>, x_prev: &mut Tensor, rngs: &mut [DiffRng]) -> Result<()>;
}

/// No modification.
pub struct NoHook;

impl StepHook for NoHook {
    fn after_step(&mut self, _: &StepState<'_>, _: &mut Tensor, _: &mut [DiffRng]) -> Result<()> {
        Ok(())
    }
}

fn fill_noise(rows: usize, d: usize, n: usize, rngs: &mut [DiffRng]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * d);
    for rng in rngs.iter_mut() {
        out.extend((0..n * d).map(|_| normal(rng)));
    }
    out
}

/// The estimate of `x0` used by a reverse step: the model's prediction,
/// clamped to embedding rows when clamping is active at `t`.
pub fn step_x0(model: &dyn Denoise, table: &EmbeddingTable, sched: &Schedule, xt: &Tensor, t: usize, clamp: ClampMode) -> Result<Tensor> {
    sched.check_step(t, 1)?;
    let b = xt.rows() / model.seq_len();
    let x0hat = predict_x0(model, sched, xt, &vec![t; b])?;
    if clamp.active(t) {
        table.clamp(&x0hat)
    } else {
        Ok(x0hat)
    }
}

/// Draws `x_{t-1}` given `x_t` and the estimate `x0hat`, one random stream
/// per sequence. At `t = 1` the estimate itself is returned.
pub fn resample(sched: &Schedule, xt: &Tensor, x0hat: &Tensor, t: usize, cfg: &SampleConfig, rngs: &mut [DiffRng]) -> Result<Tensor> {
    sched.check_step(t, 1)?;
    if t == 1 {
        return Ok(x0hat.clone());
    }
    let (rows, d) = (xt.rows(), xt.cols());
    if rngs.is_empty() || rows % rngs.len() != 0 {
        return Err(DiffLmError::ShapeMismatch(format!("{rows} latent rows for {} streams", rngs.len())));
    }
    let n = rows / rngs.len();
    let noise = fill_noise(rows, d, n, rngs);
    let (mean, std) = match cfg.resample {
        ResampleMode::Posterior => {
            let pc = posterior_coeffs(sched, t)?;
            (pc.mean(x0hat, xt)?, pc.var.sqrt())
        }
        ResampleMode::MarginalAnchor => {
            let ab = sched.alpha_bar(t - 1);
            (x0hat.map(|v| ab.sqrt() * v), (1.0 - ab).sqrt())
        }
    };
    let s = std * cfg.noise_scale;
    let data = mean.data().iter().zip(&noise).map(|(m, e)| m + s * e).collect();
    Ok(Tensor::matrix(rows, d, data)?)
}

/// One unguided reverse step for a batch whose sequences all sit at `t`.
pub fn reverse_step(
    model: &dyn Denoise,
    table: &EmbeddingTable,
    sched: &Schedule,
    xt: &Tensor,
    t: usize,
    cfg: &SampleConfig,
    rngs: &mut [DiffRng],
) -> Result<Tensor> {
    let x0hat = step_x0(model, table, sched, xt, t, cfg.clamp)?;
    resample(sched, xt, &x0hat, t, cfg, rngs)
}

/// Generated sequences with their final latents (packed rows).
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub seqs: Vec<TokenSeq>,
    pub latents: Tensor,
}

/// The random stream of sample `index`; independent of batching.
pub fn sample_stream(seed: u64, index: usize) -> DiffRng {
    stream(derive(seed, "sample"), index as u64)
}

/// Runs the reverse chain from `x_T ~ N(0, I)` for `k` samples.
pub fn generate_with(
    model: &dyn Denoise,
    table: &EmbeddingTable,
    sched: &Schedule,
    cfg: &SampleConfig,
    k: usize,
    hook: &mut dyn StepHook,
) -> Result<Samples> {
    cfg.validate(sched)?;
    let (n, d) = (model.seq_len(), model.latent_dim());
    if table.dim() != d {
        return Err(DiffLmError::ShapeMismatch(format!("table dim {} vs model dim {d}", table.dim())));
    }
    let mut seqs = Vec::with_capacity(k);
    let mut latents = Vec::with_capacity(k * n * d);
    let mut start = 0;
    while start < k {
        let b = cfg.batch_size.min(k - start);
        let mut rngs: Vec<DiffRng> = (start..start + b).map(|i| sample_stream(cfg.seed, i)).collect();
        let mut x = Tensor::matrix(b * n, d, fill_noise(b * n, d, n, &mut rngs))?;
        for t in (1..=sched.steps()).rev() {
            let x0hat = step_x0(model, table, sched, &x, t, cfg.clamp)?;
            let mut next = resample(sched, &x, &x0hat, t, cfg, &mut rngs)?;
            let state = StepState { sched, t, xt: &x, x0hat: &x0hat, offset: start };
            hook.after_step(&state, &mut next, &mut rngs)?;
            x = next;
        }
        seqs.extend(table.decode_batch(&x, n)?);
        latents.extend_from_slice(x.data());
        start += b;
    }
    Ok(Samples { seqs, latents: Tensor::matrix(k * n, d, latents)? })
}

pub fn generate(model: &dyn Denoise, table: &EmbeddingTable, sched: &Schedule, cfg: &SampleConfig, k: usize) -> Result<Samples> {
    generate_with(model, table, sched, cfg, k, &mut NoHook)
}

/// Positions held at observed tokens: after every step, anchored rows of
/// `x_{t-1}` are replaced by a fresh draw from `q(x_{t-1} | Emb(w))`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Anchors {
    /// `(position, token id)` pairs.
    pub fixed: Vec<(usize, usize)>,
}

impl Anchors {
    pub fn apply(&self, table: &EmbeddingTable, sched: &Schedule, t_prev: usize, seq_len: usize, x: &mut Tensor, rngs: &mut [DiffRng]) -> Result<()> {
        let ab = sched.alpha_bar(t_prev);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (b, rng) in rngs.iter_mut().enumerate() {
            for &(pos, id) in &self.fixed {
                if pos >= seq_len {
                    return Err(DiffLmError::ShapeMismatch(format!("anchor position {pos} beyond length {seq_len}")));
                }
                let emb = table.weight.row(id).to_vec();
                for (v, e) in x.row_mut(b * seq_len + pos).iter_mut().zip(emb) {
                    *v = sa * e + sn * normal(rng);
                }
            }
        }
        Ok(())
    }
}

/// Hook applying [`Anchors`] (also to `x_T` is unnecessary: with
/// `ab_T = 0` it is pure noise).
pub struct AnchorHook<'a> {
    pub anchors: &'a Anchors,
    pub table: &'a EmbeddingTable,
    pub seq_len: usize,
}

impl StepHook for AnchorHook<'_> {
    fn after_step(&mut self, state: &StepState<'_>, x_prev: &mut Tensor, rngs: &mut [DiffRng]) -> Result<()> {
        self.anchors.apply(self.table, state.sched, state.t - 1, self.seq_len, x_prev, rngs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in [ClampMode::Off, ClampMode::Always, ClampMode::From(40)] {
            assert_eq!(m.to_string().parse::<ClampMode>().unwrap(), m);
        }
        for m in [ResampleMode::Posterior, ResampleMode::MarginalAnchor] {
            assert_eq!(m.to_string().parse::<ResampleMode>().unwrap(), m);
        }
        assert!("from:x".parse::<ClampMode>().is_err());
    }

    #[test]
    fn clamp_activity() {
        assert!(!ClampMode::Off.active(1));
        assert!(ClampMode::Always.active(2000));
        assert!(ClampMode::From(10).active(10));
        assert!(!ClampMode::From(10).active(11));
    }

    #[test]
    fn streams_are_per_sample() {
        use rand::Rng;
        let a: u64 = sample_stream(3, 0).gen();
        let b: u64 = sample_stream(3, 1).gen();
        assert_ne!(a, b);
        assert_eq!(a, sample_stream(3, 0).gen::<u64>());
    }
}

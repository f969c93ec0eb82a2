//! The transformer denoiser `f(x_t, t)`.

use std::fmt;
use std::str::FromStr;

use autodiff::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{DiffLmError, Result};
use crate::nn::{Bound, Dropout, Linear, ParamId, ParamStore, Trunk, TrunkConfig};
use crate::schedule::Schedule;

/// What the network output means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parametrization {
    /// Predicts `x0` directly.
    X0,
    /// Predicts the posterior mean, expressed through an `x0` estimate that
    /// the posterior coefficients map to `mu`.
    Mu,
    /// Predicts the added noise.
    Eps,
}

impl fmt::Display for Parametrization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parametrization::X0 => "x0",
            Parametrization::Mu => "mu",
            Parametrization::Eps => "eps",
        })
    }
}

impl FromStr for Parametrization {
    type Err = DiffLmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x0" => Ok(Parametrization::X0),
            "mu" => Ok(Parametrization::Mu),
            "eps" => Ok(Parametrization::Eps),
            other => Err(DiffLmError::Parse(format!("unknown parametrization `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserConfig {
    pub seq_len: usize,
    pub latent_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Largest step index the model is conditioned on (the training T).
    pub max_step: usize,
    pub parametrization: Parametrization,
    /// Mix the input latent into `x0`/`mu` predictions (see [`Skip`]).
    pub skip: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            seq_len: 16,
            latent_dim: 16,
            width: 128,
            layers: 4,
            heads: 4,
            max_step: 2000,
            parametrization: Parametrization::X0,
            skip: true,
        }
    }
}

/// Anything that maps packed latents and per-sequence steps to a network
/// output; lets samplers run on toy models in tests.
pub trait Denoise {
    fn seq_len(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn parametrization(&self) -> Parametrization;
    /// `x` is `(batch * seq_len) x latent_dim`; `steps` has one entry per sequence.
    fn predict(&self, x: &Tensor, steps: &[usize]) -> Result<Tensor>;
}

/// Per-step output mixing `x0_hat = skip[t] * x_t + out[t] * F(x_t, t)`.
///
/// With `x0 ~ N(e, sigma0^2 I)` for a known row `e`, the posterior mean is
/// `k x_t / sqrt(ab) + (1 - k) e` with `k = sigma0^2 / (sigma0^2 + (1 - ab) / ab)`;
/// the coefficients are chosen so the network only has to find `e`. That
/// matters at small `t`, where the bound weights errors most heavily.
#[derive(Debug, Clone, PartialEq)]
pub struct Skip {
    pub skip: Vec<f64>,
    pub out: Vec<f64>,
}

impl Skip {
    pub fn new(sched: &Schedule, sigma0: f64) -> Self {
        let s2 = sigma0 * sigma0;
        let (skip, out) = sched
            .alpha_bars()
            .iter()
            .map(|&ab| {
                if ab >= 1.0 {
                    return (1.0, 0.0);
                }
                let k = ab * s2 / (ab * s2 + 1.0 - ab);
                let skip = if ab > 0.0 { k / ab.sqrt() } else { 0.0 };
                (skip, 1.0 - k)
            })
            .unzip();
        Skip { skip, out }
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    in_proj: Linear,
    trunk: Trunk,
    out_proj: Linear,
    skip: Option<Skip>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.latent_dim == 0 || config.max_step == 0 {
            return Err(DiffLmError::InvalidParams("latent_dim and max_step must be positive".into()));
        }
        let mut store = ParamStore::new();
        let in_proj = Linear::new(&mut store, "denoiser.in", config.latent_dim, config.width, 1.0, rng);
        let trunk = Trunk::new(
            &mut store,
            "denoiser",
            TrunkConfig {
                seq_len: config.seq_len,
                width: config.width,
                layers: config.layers,
                heads: config.heads,
                causal: false,
                time_conditioned: true,
            },
            rng,
        )?;
        let out_proj = Linear::new(&mut store, "denoiser.out", config.width, config.latent_dim, 1.0, rng);
        Ok(Denoiser { config, store, in_proj, trunk, out_proj, skip: None })
    }

    /// Installs the output mixing for the training schedule; a no-op unless
    /// `config.skip` is set and the output is an `x0` estimate.
    pub fn set_skip(&mut self, sched: &Schedule, sigma0: f64) -> Result<()> {
        if sched.base_steps() != self.config.max_step {
            return Err(DiffLmError::InvalidParams(format!(
                "schedule has {} base steps, denoiser expects {}",
                sched.base_steps(),
                self.config.max_step
            )));
        }
        self.skip = (self.config.skip && self.config.parametrization != Parametrization::Eps).then(|| Skip::new(sched, sigma0));
        Ok(())
    }

    pub fn skip(&self) -> Option<&Skip> {
        self.skip.as_ref()
    }

    pub fn position_param(&self) -> ParamId {
        self.trunk.position_param()
    }

    fn check_steps(&self, steps: &[usize]) -> Result<()> {
        if let Some(&t) = steps.iter().find(|&&t| t > self.config.max_step) {
            return Err(DiffLmError::StepOutOfRange { step: t, min: 0, max: self.config.max_step });
        }
        Ok(())
    }

    /// Records the forward pass on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        steps: &[usize],
        dropout: Option<Dropout<'_>>,
    ) -> Result<Var> {
        self.check_steps(steps)?;
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.latent_dim || shape[0] != steps.len() * self.config.seq_len {
            return Err(DiffLmError::ShapeMismatch(format!(
                "latent {shape:?} for {} sequences of {}x{}",
                steps.len(),
                self.config.seq_len,
                self.config.latent_dim
            )));
        }
        let h = self.in_proj.forward(tape, p, x)?;
        let h = self.trunk.forward(tape, p, h, Some(steps), dropout)?;
        let f = self.out_proj.forward(tape, p, h)?;
        let Some(skip) = &self.skip else { return Ok(f) };
        let n = self.config.seq_len;
        let per_row = |c: &[f64]| steps.iter().flat_map(|&t| std::iter::repeat(c[t]).take(n)).collect::<Vec<f64>>();
        let a = tape.scale_rows(x, per_row(&skip.skip))?;
        let b = tape.scale_rows(f, per_row(&skip.out))?;
        Ok(tape.add(a, b)?)
    }

    /// The step-conditioning vector added to every position for step `t`.
    pub fn time_conditioning(&self, t: usize) -> Result<Vec<f64>> {
        self.check_steps(&[t])?;
        let te = self.trunk.time_embedding().expect("denoiser trunk is step-conditioned");
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false)?;
        let v = te.forward(&mut tape, &p, &[t])?;
        Ok(tape.value(v).data().to_vec())
    }
}

impl Denoise for Denoiser {
    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn parametrization(&self) -> Parametrization {
        self.config.parametrization
    }

    fn predict(&self, x: &Tensor, steps: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let y = self.forward(&mut tape, &p, xv, steps, None)?;
        Ok(tape.value(y).clone())
    }
}

/// The network's estimate of `x0` from latents at schedule steps `steps`
/// (one per sequence), whatever the parametrization. For a noise
/// prediction at a step with `alpha_bar = 0` the estimate is zero.
pub fn predict_x0(model: &dyn Denoise, sched: &Schedule, x: &Tensor, steps: &[usize]) -> Result<Tensor> {
    let model_steps: Vec<usize> = steps.iter().map(|&t| sched.model_step(t)).collect();
    let out = model.predict(x, &model_steps)?;
    if model.parametrization() != Parametrization::Eps {
        return Ok(out);
    }
    let n = model.seq_len();
    let mut x0 = out;
    for (b, &t) in steps.iter().enumerate() {
        let ab = sched.alpha_bar(t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        for r in b * n..(b + 1) * n {
            let xr = x.row(r);
            for (c, v) in x0.row_mut(r).iter_mut().enumerate() {
                *v = if ab > 0.0 { (xr[c] - sn * *v) / sa } else { 0.0 };
            }
        }
    }
    Ok(x0)
}

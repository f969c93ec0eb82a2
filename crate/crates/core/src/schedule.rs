//! Noise schedules.
//!
//! `alpha_bar[0] = 1` is the data-side anchor and `alpha_bar[t]` is the
//! product of `1 - beta_s` for `s = 1..=t`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{DiffLmError, Result};

/// Largest per-step variance allowed for the linear and cosine kinds.
pub const BETA_CAP: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
    Sqrt,
    /// Explicit per-step betas.
    Custom,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Sqrt => "sqrt",
            ScheduleKind::Custom => "custom",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = DiffLmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "sqrt" => Ok(ScheduleKind::Sqrt),
            "custom" => Ok(ScheduleKind::Custom),
            other => Err(DiffLmError::InvalidParams(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Everything needed to rebuild a schedule; this, not the arrays, is what
/// gets persisted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    /// Starting-noise constant of the sqrt kind.
    pub s: f64,
    /// Linear endpoints at T = 2000; rescaled by 2000/T.
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams { s: 1e-4, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    params: ScheduleParams,
    base_steps: usize,
    stride: usize,
    /// Original betas of a custom schedule, kept so it can be rebuilt.
    custom_betas: Vec<f64>,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Schedule {
    pub fn build(kind: ScheduleKind, steps: usize, params: ScheduleParams) -> Result<Self> {
        if steps == 0 {
            return Err(DiffLmError::InvalidParams("step count must be positive".into()));
        }
        let tf = steps as f64;
        let (beta, alpha_bar) = match kind {
            ScheduleKind::Sqrt => {
                if !(params.s > 0.0 && params.s < 1.0) {
                    return Err(DiffLmError::InvalidParams(format!("s = {} not in (0, 1)", params.s)));
                }
                let mut ab = vec![1.0; steps + 1];
                for (t, a) in ab.iter_mut().enumerate().skip(1) {
                    *a = (1.0 - (t as f64 / tf + params.s).sqrt()).max(0.0);
                }
                (betas_from(&ab), ab)
            }
            ScheduleKind::Linear => {
                let scale = 2000.0 / tf;
                let (lo, hi) = (params.beta_start * scale, params.beta_end * scale);
                if !(params.beta_start > 0.0 && params.beta_end >= params.beta_start) {
                    return Err(DiffLmError::InvalidParams(format!(
                        "linear endpoints {} .. {} invalid",
                        params.beta_start, params.beta_end
                    )));
                }
                let beta: Vec<f64> = (0..steps)
                    .map(|i| {
                        let frac = if steps == 1 { 0.0 } else { i as f64 / (tf - 1.0) };
                        (lo + (hi - lo) * frac).min(BETA_CAP)
                    })
                    .collect();
                let ab = alpha_bars_from(&beta);
                (beta, ab)
            }
            ScheduleKind::Cosine => {
                // Ratios of f start from f(0), which normalizes alpha_bar[0] to 1.
                let f = |t: f64| (((t / tf + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                let beta: Vec<f64> = (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).min(BETA_CAP))
                    .collect();
                let ab = alpha_bars_from(&beta);
                (beta, ab)
            }
            ScheduleKind::Custom => {
                return Err(DiffLmError::InvalidParams("custom schedules are built with from_betas".into()))
            }
        };
        let sched = Schedule { kind, params, base_steps: steps, stride: 1, custom_betas: Vec::new(), beta, alpha_bar };
        sched.validate()?;
        Ok(sched)
    }

    /// A schedule with explicitly given `beta_1..beta_T`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(DiffLmError::InvalidParams("step count must be positive".into()));
        }
        let alpha_bar = alpha_bars_from(&beta);
        let sched = Schedule {
            kind: ScheduleKind::Custom,
            params: ScheduleParams::default(),
            base_steps: beta.len(),
            stride: 1,
            custom_betas: beta.clone(),
            beta,
            alpha_bar,
        };
        sched.validate()?;
        Ok(sched)
    }

    /// The default sqrt schedule with `s = 1e-4`.
    pub fn sqrt(steps: usize) -> Result<Self> {
        Self::build(ScheduleKind::Sqrt, steps, ScheduleParams::default())
    }

    /// Keeps every `stride`-th marginal: `alpha_bar'[t] = alpha_bar[stride * t]`.
    pub fn downsample(&self, stride: usize) -> Result<Self> {
        let steps = self.steps();
        if stride == 0 || steps % stride != 0 {
            return Err(DiffLmError::InvalidStride { stride, steps });
        }
        if stride == 1 {
            return Ok(self.clone());
        }
        let alpha_bar: Vec<f64> = (0..=steps / stride).map(|t| self.alpha_bar[stride * t]).collect();
        let sched = Schedule {
            kind: self.kind,
            params: self.params,
            base_steps: self.base_steps,
            stride: self.stride * stride,
            custom_betas: self.custom_betas.clone(),
            beta: betas_from(&alpha_bar),
            alpha_bar,
        };
        sched.validate()?;
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        if self.alpha_bar[0] != 1.0 {
            return Err(DiffLmError::InvalidParams("alpha_bar[0] must be 1".into()));
        }
        for (i, &b) in self.beta.iter().enumerate() {
            if !(b > 0.0 && b <= 1.0) {
                return Err(DiffLmError::InvalidParams(format!("beta[{}] = {b} outside (0, 1]", i + 1)));
            }
        }
        for t in 1..self.alpha_bar.len() {
            if !(self.alpha_bar[t] < self.alpha_bar[t - 1]) || self.alpha_bar[t] < 0.0 {
                return Err(DiffLmError::InvalidParams(format!("alpha_bar not strictly decreasing at {t}")));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    /// Number of steps T of this (possibly downsampled) schedule.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// Step count of the schedule this one was downsampled from.
    pub fn base_steps(&self) -> usize {
        self.base_steps
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Step index on the original (training) scale, which is what a denoiser
    /// trained on the base schedule expects as its time input.
    pub fn model_step(&self, t: usize) -> usize {
        t * self.stride
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `alpha_bar_t` for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Signal-to-noise ratio `alpha_bar / (1 - alpha_bar)`.
    pub fn snr(&self, t: usize) -> f64 {
        let a = self.alpha_bar(t);
        a / (1.0 - a)
    }

    /// Noise std implied at t = 0 by the raw sqrt formula, i.e. `s^(1/4)`.
    /// Used as the default std of the embedding-to-latent transition.
    pub fn initial_std(&self) -> f64 {
        match self.kind {
            ScheduleKind::Sqrt => self.params.s.sqrt().sqrt(),
            _ => self.beta[0].sqrt(),
        }
    }

    pub fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            return Err(DiffLmError::StepOutOfRange { step: t, min, max: self.steps() });
        }
        Ok(())
    }

    /// Key/value description used by checkpoints.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("sched.kind".into(), self.kind.to_string());
        m.insert("sched.steps".into(), self.base_steps.to_string());
        m.insert("sched.s".into(), format!("{:e}", self.params.s));
        m.insert("sched.beta_start".into(), format!("{:e}", self.params.beta_start));
        m.insert("sched.beta_end".into(), format!("{:e}", self.params.beta_end));
        m.insert("sched.stride".into(), self.stride.to_string());
        if self.kind == ScheduleKind::Custom {
            let base: Vec<String> = self.custom_betas.iter().map(|b| format!("{b:e}")).collect();
            m.insert("sched.betas".into(), base.join(","));
        }
        m
    }

    pub fn from_kv(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(m: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str> {
            m.get(k).map(String::as_str).ok_or_else(|| DiffLmError::Parse(format!("missing `{k}`")))
        }
        fn num<T: FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<T> {
            get(m, k)?.parse().map_err(|_| DiffLmError::Parse(format!("bad value for `{k}`")))
        }
        let kind: ScheduleKind = get(m, "sched.kind")?.parse()?;
        let params = ScheduleParams {
            s: num(m, "sched.s")?,
            beta_start: num(m, "sched.beta_start")?,
            beta_end: num(m, "sched.beta_end")?,
        };
        let base = if kind == ScheduleKind::Custom {
            let betas = get(m, "sched.betas")?
                .split(',')
                .map(|b| b.parse().map_err(|_| DiffLmError::Parse("bad value for `sched.betas`".into())))
                .collect::<Result<Vec<f64>>>()?;
            Schedule::from_betas(betas)?
        } else {
            Schedule::build(kind, num(m, "sched.steps")?, params)?
        };
        let stride: usize = num(m, "sched.stride")?;
        if stride == 1 {
            Ok(base)
        } else {
            base.downsample(stride)
        }
    }
}

fn betas_from(alpha_bar: &[f64]) -> Vec<f64> {
    alpha_bar.windows(2).map(|w| 1.0 - w[1] / w[0]).collect()
}

fn alpha_bars_from(beta: &[f64]) -> Vec<f64> {
    let mut ab = Vec::with_capacity(beta.len() + 1);
    let mut acc = 1.0;
    ab.push(acc);
    for b in beta {
        acc *= 1.0 - b;
        ab.push(acc);
    }
    ab
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_initial_std_is_point_one() {
        let s = Schedule::sqrt(2000).unwrap();
        assert!((s.initial_std() - 0.1).abs() < 1e-15);
        // Raw formula at t = 0 gives 0.99.
        assert!((1.0 - (0.0f64 + 1e-4).sqrt() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn sqrt_end_is_clipped_to_zero() {
        let s = Schedule::sqrt(2000).unwrap();
        let raw = 1.0 - (1.0f64 + 1e-4).sqrt();
        assert!(raw < 0.0 && (raw + 5.0e-5).abs() < 1e-6);
        assert_eq!(s.alpha_bar(2000), 0.0);
        assert_eq!(s.beta(2000), 1.0);
    }

    #[test]
    fn linear_cap_keeps_short_schedules_valid() {
        let s = Schedule::build(ScheduleKind::Linear, 10, ScheduleParams::default()).unwrap();
        assert!(s.betas().iter().all(|&b| b <= BETA_CAP));
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = ScheduleParams { s: 1.5, ..Default::default() };
        assert!(matches!(Schedule::build(ScheduleKind::Sqrt, 10, bad), Err(DiffLmError::InvalidParams(_))));
        assert!(Schedule::build(ScheduleKind::Sqrt, 0, ScheduleParams::default()).is_err());
    }

    #[test]
    fn stride_must_divide() {
        let s = Schedule::sqrt(2000).unwrap();
        assert!(matches!(s.downsample(3), Err(DiffLmError::InvalidStride { .. })));
        assert_eq!(s.downsample(1).unwrap(), s);
    }

    #[test]
    fn kv_round_trip() {
        let s = Schedule::sqrt(200).unwrap().downsample(4).unwrap();
        let back = Schedule::from_kv(&s.to_kv()).unwrap();
        assert_eq!(back, s);
    }
}

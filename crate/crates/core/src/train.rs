//! The training loop.

use std::fmt;
use std::str::FromStr;

use autodiff::Tensor;
use rand::Rng;

use crate::embedding::TokenSeq;
use crate::error::{DiffLmError, Result};
use crate::model::DiffusionLm;
use crate::nn::Dropout;
use crate::objectives::{loss_grads_terms, nll_bound, rounding_accuracy, LossBreakdown, LossDraws, Objective};
use crate::optim::{clip_grad_norm, round_to_f32, AdamW, AdamWConfig};
use crate::rng::{derive, stream, DiffRng};

/// Storage precision of parameters between updates. Arithmetic is always
/// 64-bit; `F32` rounds parameters to single precision after every update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "32",
            Precision::F64 => "64",
        })
    }
}

impl FromStr for Precision {
    type Err = DiffLmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" => Ok(Precision::F32),
            "64" => Ok(Precision::F64),
            other => Err(DiffLmError::Parse(format!("precision must be 32 or 64, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Initial learning rate, decayed linearly to zero.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Gradient norm clip, applied in vlb mode only.
    pub clip_norm: f64,
    pub seed: u64,
    pub objective: Objective,
    pub dropout: f64,
    pub train_embeddings: bool,
    /// Metrics are emitted every `eval_every` iterations and at the end.
    pub eval_every: usize,
    /// Sequences used for the bound and rounding accuracy at each eval.
    pub eval_sequences: usize,
    /// Sampled steps per sequence in the bound estimate; 0 skips the bound.
    pub bound_steps: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            batch_size: 64,
            iterations: 10_000,
            clip_norm: 1.0,
            seed: 0,
            objective: Objective::Simple,
            dropout: 0.1,
            train_embeddings: true,
            eval_every: 500,
            eval_sequences: 128,
            bound_steps: 8,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DiffLmError::InvalidParams(m.into()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.iterations == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("iterations, batch_size and eval_every must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }
}

/// Per-step loss history for importance sampling of steps in vlb mode:
/// once every step has a full history, `p(t) ∝ sqrt(E[L_t^2])`, mixed
/// with a little uniform mass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSampler {
    pub history: Vec<Vec<f64>>,
}

impl StepSampler {
    pub const HISTORY: usize = 10;
    const UNIFORM_MIX: f64 = 0.001;

    pub fn new(steps: usize) -> Self {
        StepSampler { history: vec![Vec::new(); steps] }
    }

    pub fn steps(&self) -> usize {
        self.history.len()
    }

    pub fn warm(&self) -> bool {
        self.history.iter().all(|h| h.len() == Self::HISTORY)
    }

    pub fn probs(&self) -> Vec<f64> {
        let t = self.steps();
        let uniform = vec![1.0 / t as f64; t];
        if !self.warm() {
            return uniform;
        }
        let w: Vec<f64> = self.history.iter().map(|h| (h.iter().map(|l| l * l).sum::<f64>() / h.len() as f64).sqrt()).collect();
        let total: f64 = w.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return uniform;
        }
        w.iter().map(|x| (1.0 - Self::UNIFORM_MIX) * x / total + Self::UNIFORM_MIX / t as f64).collect()
    }

    /// Draws `count` steps in `1..=T` with their probabilities.
    pub fn draw(&self, count: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<f64>) {
        let p = self.probs();
        let mut cdf = Vec::with_capacity(p.len());
        let mut acc = 0.0;
        for x in &p {
            acc += x;
            cdf.push(acc);
        }
        (0..count)
            .map(|_| {
                let u = rng.gen::<f64>() * acc;
                let i = cdf.partition_point(|&c| c <= u).min(p.len() - 1);
                (i + 1, p[i])
            })
            .unzip()
    }

    pub fn record(&mut self, t: usize, loss: f64) {
        let h = &mut self.history[t - 1];
        if h.len() == Self::HISTORY {
            h.remove(0);
        }
        h.push(loss);
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub iter: usize,
    /// Mean training loss over the iterations since the previous record.
    pub loss: LossBreakdown,
    pub nll_bound: f64,
    pub nll_se: f64,
    pub rounding_acc: f64,
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        let l = &self.loss;
        format!(
            "iter={} t_term={} diffusion={} emb_match={} rounding={} total={} nll_bound={} nll_se={} rounding_acc={}",
            self.iter, l.t_term, l.diffusion, l.emb_match, l.rounding, l.total, self.nll_bound, self.nll_se, self.rounding_acc
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let get = |key: &str| -> Result<f64> {
            line.split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| DiffLmError::Parse(format!("metrics line lacks `{key}`")))?
                .parse::<f64>()
                .map_err(|e| DiffLmError::Parse(format!("{key}: {e}")))
        };
        Ok(MetricsRecord {
            iter: get("iter")? as usize,
            loss: LossBreakdown {
                t_term: get("t_term")?,
                diffusion: get("diffusion")?,
                emb_match: get("emb_match")?,
                rounding: get("rounding")?,
                total: get("total")?,
            },
            nll_bound: get("nll_bound")?,
            nll_se: get("nll_se")?,
            rounding_acc: get("rounding_acc")?,
        })
    }
}

/// Everything besides the model needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub opt: AdamW,
    /// Completed iterations.
    pub iter: usize,
    pub sampler: StepSampler,
    /// Running mean of the losses since the last record.
    pub window: LossBreakdown,
    pub window_len: usize,
    /// Mean training loss of the first window.
    pub initial_loss: Option<f64>,
    /// Consecutive evals with loss above ten times the initial.
    pub strikes: usize,
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_STRIKES: usize = 3;

impl Trainer {
    pub fn new(config: TrainConfig, model: &DiffusionLm) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(config.adamw(), &model.tensors());
        let sampler = StepSampler::new(model.sched.steps());
        Ok(Trainer {
            config,
            opt,
            iter: 0,
            sampler,
            window: LossBreakdown::default(),
            window_len: 0,
            initial_loss: None,
            strikes: 0,
        })
    }

    pub fn done(&self) -> bool {
        self.iter >= self.config.iterations
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        self.config.lr * (1.0 - iter as f64 / self.config.iterations as f64)
    }

    /// One optimizer update on a batch drawn with replacement from `train`.
    pub fn step(&mut self, model: &mut DiffusionLm, train: &[TokenSeq]) -> Result<LossBreakdown> {
        if train.is_empty() {
            return Err(DiffLmError::EmptySet);
        }
        let cfg = &self.config;
        let mut rng = stream(derive(cfg.seed, "train"), self.iter as u64);
        let batch: Vec<TokenSeq> = (0..cfg.batch_size).map(|_| train[rng.gen_range(0..train.len())].clone()).collect();
        let (n, d) = (model.seq_len(), model.latent_dim());
        let draws = match cfg.objective {
            Objective::Simple => LossDraws::uniform(batch.len(), n, d, model.sched.steps(), &mut rng),
            Objective::Vlb => {
                let (steps, probs) = self.sampler.draw(batch.len(), &mut rng);
                LossDraws::with_steps(steps, probs, n, d, &mut rng)
            }
        };
        let dropout = (cfg.dropout > 0.0).then_some(Dropout { rate: cfg.dropout, rng: &mut rng });
        let (loss, mut grads, per_seq) = loss_grads_terms(model, &batch, &draws, cfg.objective, cfg.train_embeddings, dropout)?;
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(DiffLmError::NonFiniteGradient { step: self.iter });
        }
        if cfg.objective == Objective::Vlb {
            clip_grad_norm(&mut grads, cfg.clip_norm);
            for ((&t, &p), s) in draws.steps.iter().zip(&draws.step_probs).zip(per_seq) {
                self.sampler.record(t, s * p);
            }
        }
        let lr = self.lr_at(self.iter);
        let train_emb = cfg.train_embeddings;
        let precision = cfg.precision;
        let mut decay: Vec<bool> = model.tensors().iter().map(|t| t.shape().len() == 2).collect();
        if !train_emb {
            // Frozen embeddings: zero gradient and no decay keep them fixed.
            let last = grads.len() - 1;
            grads[last] = Tensor::zeros(grads[last].shape());
            decay[last] = false;
        }
        let mut params = model.tensors_mut();
        self.opt.step(&mut params, &grads, lr, &decay)?;
        if precision == Precision::F32 {
            params.iter_mut().for_each(|t| round_to_f32(t));
        }
        self.iter += 1;
        self.window_len += 1;
        self.window.accumulate(&loss, self.window_len);
        Ok(loss)
    }

    /// Metrics at the current iteration; also advances divergence tracking.
    pub fn evaluate(&mut self, model: &DiffusionLm, train: &[TokenSeq], dev: &[TokenSeq]) -> Result<MetricsRecord> {
        let cfg = &self.config;
        let mut rng: DiffRng = stream(derive(cfg.seed, "eval"), self.iter as u64);
        let k = cfg.eval_sequences;
        let (nll_bound_v, nll_se) = if cfg.bound_steps > 0 && !dev.is_empty() && k > 0 {
            let est = nll_bound(model, &dev[..k.min(dev.len())], cfg.bound_steps, 64, &mut rng)?;
            (est.nats_per_token, est.std_err)
        } else {
            (f64::NAN, f64::NAN)
        };
        let acc = if k > 0 && !train.is_empty() { rounding_accuracy(model, &train[..k.min(train.len())], &mut rng)? } else { f64::NAN };
        let record = MetricsRecord { iter: self.iter, loss: self.window, nll_bound: nll_bound_v, nll_se, rounding_acc: acc };

        let mean = self.window.total;
        if self.window_len > 0 {
            match self.initial_loss {
                None => self.initial_loss = Some(mean),
                Some(init) => {
                    if mean > DIVERGENCE_FACTOR * init.abs() || !mean.is_finite() {
                        self.strikes += 1;
                    } else {
                        self.strikes = 0;
                    }
                    if self.strikes >= DIVERGENCE_STRIKES {
                        return Err(DiffLmError::Divergence { iteration: self.iter, loss: mean, initial: init });
                    }
                }
            }
        }
        self.window = LossBreakdown::default();
        self.window_len = 0;
        Ok(record)
    }

    /// Trains to completion (or until `on_record` fails), calling
    /// `on_record` after every evaluation.
    pub fn run(
        &mut self,
        model: &mut DiffusionLm,
        train: &[TokenSeq],
        dev: &[TokenSeq],
        mut on_record: impl FnMut(&MetricsRecord, &Trainer, &DiffusionLm) -> Result<()>,
    ) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        while !self.done() {
            self.step(model, train)?;
            if self.iter % self.config.eval_every == 0 || self.done() {
                let r = self.evaluate(model, train, dev)?;
                on_record(&r, self, model)?;
                records.push(r);
            }
        }
        Ok(records)
    }
}

/// Convenience wrapper: fresh trainer, run to completion.
pub fn train(config: TrainConfig, model: &mut DiffusionLm, train: &[TokenSeq], dev: &[TokenSeq]) -> Result<(Trainer, Vec<MetricsRecord>)> {
    let mut trainer = Trainer::new(config, model)?;
    let records = trainer.run(model, train, dev, |_, _, _| Ok(()))?;
    Ok((trainer, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_lines_round_trip() {
        let r = MetricsRecord {
            iter: 40,
            loss: LossBreakdown { t_term: 0.0, diffusion: 1.25, emb_match: 0.1, rounding: 3.0e-5, total: 1.35003 },
            nll_bound: 2.5,
            nll_se: f64::NAN,
            rounding_acc: 0.75,
        };
        let back = MetricsRecord::parse_line(&r.to_line()).unwrap();
        assert_eq!(back.to_line(), r.to_line());
        assert!(MetricsRecord::parse_line("iter=3").is_err());
    }

    #[test]
    fn sampler_is_uniform_until_warm() {
        let mut s = StepSampler::new(4);
        assert_eq!(s.probs(), vec![0.25; 4]);
        for t in 1..=4 {
            for _ in 0..StepSampler::HISTORY {
                s.record(t, t as f64);
            }
        }
        assert!(s.warm());
        let p = s.probs();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[3] > p[0]);
        // History is bounded.
        s.record(1, 100.0);
        assert_eq!(s.history[0].len(), StepSampler::HISTORY);
    }

    #[test]
    fn draws_follow_probabilities() {
        let mut s = StepSampler::new(3);
        for _ in 0..StepSampler::HISTORY {
            s.record(1, 0.0);
            s.record(2, 0.0);
            s.record(3, 1.0);
        }
        let (steps, probs) = s.draw(2000, &mut crate::rng::seeded(1));
        let threes = steps.iter().filter(|&&t| t == 3).count();
        assert!(threes > 1980);
        assert!(steps.iter().all(|&t| (1..=3).contains(&t)));
        assert!(probs.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { iterations: 0, ..TrainConfig::default() }.validate().is_err());
        assert_eq!("32".parse::<Precision>().unwrap(), Precision::F32);
        assert!("16".parse::<Precision>().is_err());
    }
}

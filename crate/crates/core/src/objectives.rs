//! Training losses and the variational bound.
//!
//! Every loss is a per-sequence sum (squared norms over all `n x d`
//! entries, NLL over all positions) averaged over the batch, with one
//! diffusion step drawn per sequence.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use autodiff::{Tape, Tensor, Var};
use rand::Rng;

use crate::denoiser::{predict_x0, Parametrization};
use crate::diffusion::posterior_coeffs;
use crate::embedding::TokenSeq;
use crate::error::{DiffLmError, Result};
use crate::model::DiffusionLm;
use crate::nn::Dropout;
use crate::rng::{normal_matrix, DiffRng};
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Unweighted squared errors (the default).
    Simple,
    /// Bound-weighted terms with importance-sampled steps.
    Vlb,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Simple => "simple",
            Objective::Vlb => "vlb",
        })
    }
}

impl FromStr for Objective {
    type Err = DiffLmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Objective::Simple),
            "vlb" => Ok(Objective::Vlb),
            other => Err(DiffLmError::Parse(format!("unknown objective `{other}`"))),
        }
    }
}

/// Batch-mean loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// `alpha_bar_T * ||x0||^2` (simple) or the prior KL (vlb).
    pub t_term: f64,
    /// Terms of sequences whose sampled step is at least 2.
    pub diffusion: f64,
    /// Terms of sequences whose sampled step is 1.
    pub emb_match: f64,
    /// `-log p(w | x0)`.
    pub rounding: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const TERMS: [&'static str; 5] = ["t_term", "diffusion", "emb_match", "rounding", "total"];

    pub fn values(&self) -> [f64; 5] {
        [self.t_term, self.diffusion, self.emb_match, self.rounding, self.total]
    }

    fn from_parts(t_term: f64, diffusion: f64, emb_match: f64, rounding: f64) -> Self {
        LossBreakdown { t_term, diffusion, emb_match, rounding, total: t_term + diffusion + emb_match + rounding }
    }

    fn check_finite(&self) -> Result<()> {
        for (name, v) in Self::TERMS.iter().zip(self.values()) {
            if !v.is_finite() {
                return Err(DiffLmError::NonFiniteLoss { term: name.to_string() });
            }
        }
        Ok(())
    }

    /// Running mean update with the `k`-th value (1-based).
    pub fn accumulate(&mut self, other: &LossBreakdown, k: usize) {
        let w = 1.0 / k as f64;
        self.t_term += w * (other.t_term - self.t_term);
        self.diffusion += w * (other.diffusion - self.diffusion);
        self.emb_match += w * (other.emb_match - self.emb_match);
        self.rounding += w * (other.rounding - self.rounding);
        self.total = self.t_term + self.diffusion + self.emb_match + self.rounding;
    }
}

/// The randomness of one loss evaluation, drawn up front so a loss can be
/// recomputed exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDraws {
    /// One step in `1..=T` per sequence.
    pub steps: Vec<usize>,
    /// Noise of `q(x0 | w)`, packed `(batch * n) x d`.
    pub x0_noise: Tensor,
    /// Noise of `q(x_t | x0)`.
    pub eps: Tensor,
    /// Proposal probability of each step (vlb importance weights).
    pub step_probs: Vec<f64>,
}

impl LossDraws {
    pub fn uniform(batch: usize, seq_len: usize, dim: usize, steps: usize, rng: &mut impl Rng) -> Self {
        let ts: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=steps)).collect();
        Self::with_steps(ts, vec![1.0 / steps as f64; batch], seq_len, dim, rng)
    }

    pub fn with_steps(steps: Vec<usize>, step_probs: Vec<f64>, seq_len: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let rows = steps.len() * seq_len;
        let x0_noise = normal_matrix(rng, rows, dim);
        let eps = normal_matrix(rng, rows, dim);
        LossDraws { steps, x0_noise, eps, step_probs }
    }
}

fn check_batch(model: &DiffusionLm, batch: &[TokenSeq], draws: &LossDraws) -> Result<()> {
    let n = model.seq_len();
    if batch.is_empty() {
        return Err(DiffLmError::EmptySet);
    }
    if let Some(w) = batch.iter().find(|w| w.len() != n) {
        return Err(DiffLmError::ShapeMismatch(format!("sequence of length {} for model length {n}", w.len())));
    }
    let rows = batch.len() * n;
    if draws.steps.len() != batch.len() || draws.x0_noise.rows() != rows || draws.eps.rows() != rows {
        return Err(DiffLmError::ShapeMismatch("draws do not match the batch".into()));
    }
    let t_max = model.sched.steps();
    if let Some(&t) = draws.steps.iter().find(|&&t| t == 0 || t > t_max) {
        return Err(DiffLmError::StepOutOfRange { step: t, min: 1, max: t_max });
    }
    Ok(())
}

/// `SNR_{t-1} - SNR_t`, which equals `c0^2 / var` of the posterior at `t`.
pub fn snr_drop(sched: &Schedule, t: usize) -> f64 {
    let snr_prev = sched.snr(t - 1);
    snr_prev - sched.snr(t)
}

/// Per-row weights and targets of the diffusion term for one sequence.
struct RowPlan {
    /// Weight on `||target - out||^2`.
    weight: f64,
    /// Whether the target is `Emb(w)` rather than `x0` / `eps`.
    target_emb: bool,
}

fn row_plan(sched: &Schedule, param: Parametrization, objective: Objective, t: usize, sigma0: f64, prob: f64, inv_d: f64) -> Result<RowPlan> {
    let ab = sched.alpha_bar(t);
    // Squared x0 error per squared eps error.
    let eps_factor = if ab > 0.0 { (1.0 - ab) / ab } else { 0.0 };
    Ok(match (objective, param, t) {
        (Objective::Simple, Parametrization::Eps, _) => RowPlan { weight: inv_d, target_emb: false },
        (Objective::Simple, _, 1) => RowPlan { weight: inv_d, target_emb: true },
        (Objective::Simple, Parametrization::X0, _) => RowPlan { weight: inv_d, target_emb: false },
        (Objective::Simple, Parametrization::Mu, _) => {
            let c0 = posterior_coeffs(sched, t)?.c0;
            RowPlan { weight: inv_d * c0 * c0, target_emb: false }
        }
        (Objective::Vlb, _, _) => {
            let base = if t == 1 { 1.0 / (2.0 * sigma0 * sigma0) } else { 0.5 * snr_drop(sched, t) };
            let conv = if param == Parametrization::Eps { eps_factor } else { 1.0 };
            RowPlan { weight: base * conv / prob, target_emb: false }
        }
    })
}

/// Records the loss on `tape`. Returns the scalar to differentiate, the
/// breakdown, and the embedding leaf.
pub(crate) struct LossGraph {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub embedding: Var,
    pub params: crate::nn::Bound,
    /// Weighted diffusion (or t = 1) term of each sequence.
    pub per_seq: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn record_loss(
    tape: &mut Tape,
    model: &DiffusionLm,
    batch: &[TokenSeq],
    draws: &LossDraws,
    objective: Objective,
    train_embeddings: bool,
    dropout: Option<Dropout<'_>>,
) -> Result<LossGraph> {
    check_batch(model, batch, draws)?;
    let sched = &model.sched;
    let param = model.denoiser.config.parametrization;
    let (n, d) = (model.seq_len(), model.latent_dim());
    let bsz = batch.len();
    let sigma0 = model.table.sigma0;
    let ids: Vec<usize> = batch.iter().flat_map(|w| w.ids().iter().copied()).collect();

    let params = model.denoiser.store.bind(tape, true)?;
    let e = tape.leaf(model.table.weight.clone(), train_embeddings)?;
    let emb = tape.gather(e, &ids)?;
    let noise0 = tape.constant(draws.x0_noise.clone())?;
    let noise0 = tape.scale(noise0, sigma0)?;
    let x0 = tape.add(emb, noise0)?;

    let mut signal = Vec::with_capacity(bsz * n);
    let mut noise = Vec::with_capacity(bsz * n);
    for &t in &draws.steps {
        let ab = sched.alpha_bar(t);
        signal.extend(std::iter::repeat(ab.sqrt()).take(n));
        noise.extend(std::iter::repeat((1.0 - ab).sqrt()).take(n));
    }
    let xt_sig = tape.scale_rows(x0, signal)?;
    let scaled_eps = {
        let mut t = draws.eps.clone();
        for (r, &s) in noise.iter().enumerate() {
            t.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        t
    };
    let eps_part = tape.constant(scaled_eps)?;
    let xt = tape.add(xt_sig, eps_part)?;
    let model_steps: Vec<usize> = draws.steps.iter().map(|&t| sched.model_step(t)).collect();
    let out = model.denoiser.forward(tape, &params, xt, &model_steps, dropout)?;

    // Diffusion terms: sum_rows w_row * ||target_row - out_row||^2.
    let mut plans = Vec::with_capacity(bsz);
    for (&t, &p) in draws.steps.iter().zip(&draws.step_probs) {
        plans.push(row_plan(sched, param, objective, t, sigma0, p, 1.0 / d as f64)?);
    }
    let target = if param == Parametrization::Eps {
        tape.constant(draws.eps.clone())?
    } else {
        let mask: Vec<f64> = plans.iter().flat_map(|p| std::iter::repeat(if p.target_emb { 0.0 } else { 1.0 }).take(n)).collect();
        let inv: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
        let a = tape.scale_rows(x0, mask)?;
        let b = tape.scale_rows(emb, inv)?;
        tape.add(a, b)?
    };
    let root: Vec<f64> = plans.iter().flat_map(|p| std::iter::repeat(p.weight.sqrt()).take(n)).collect();
    let wt = tape.scale_rows(target, root.clone())?;
    let wo = tape.scale_rows(out, root)?;
    let diff_sum = tape.squared_error(wt, wo)?;

    // Per-sequence values for the breakdown.
    let (tv, ov) = (tape.value(wt).clone(), tape.value(wo).clone());
    let (mut diffusion, mut emb_match) = (0.0, 0.0);
    let mut per_seq = Vec::with_capacity(bsz);
    for (b, &t) in draws.steps.iter().enumerate() {
        let s: f64 = (b * n * d..(b + 1) * n * d).map(|i| (tv.data()[i] - ov.data()[i]).powi(2)).sum();
        per_seq.push(s);
        if t == 1 {
            emb_match += s;
        } else {
            diffusion += s;
        }
    }

    // Prior term.
    let ab_t = sched.alpha_bar(sched.steps());
    let x0_sq = tape.mul(x0, x0)?;
    let x0_sq = tape.sum(x0_sq)?;
    let (t_coef, t_const) = match objective {
        Objective::Simple => (ab_t / d as f64, 0.0),
        Objective::Vlb => (0.5 * ab_t, if ab_t > 0.0 { 0.5 * (n * d * bsz) as f64 * prior_gap(ab_t) } else { 0.0 }),
    };
    let t_term_var = tape.scale(x0_sq, t_coef)?;
    let t_term = tape.value(t_term_var).item() + t_const;

    let logits = tape.matmul_t(x0, e)?;
    let rounding_var = tape.cross_entropy(logits, &ids)?;
    let rounding = tape.value(rounding_var).item();

    let s1 = tape.add(diff_sum, t_term_var)?;
    let s2 = tape.add(s1, rounding_var)?;
    let total = tape.scale(s2, 1.0 / bsz as f64)?;

    let inv_b = 1.0 / bsz as f64;
    let breakdown = LossBreakdown::from_parts(t_term * inv_b, diffusion * inv_b, emb_match * inv_b, rounding * inv_b);
    breakdown.check_finite()?;
    Ok(LossGraph { total, breakdown, embedding: e, params, per_seq })
}

/// Loss value without gradients.
pub fn loss_with_draws(model: &DiffusionLm, batch: &[TokenSeq], draws: &LossDraws, objective: Objective) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    Ok(record_loss(&mut tape, model, batch, draws, objective, true, None)?.breakdown)
}

/// Loss and gradients for every tensor of [`DiffusionLm::tensors`].
pub fn loss_and_grads(
    model: &DiffusionLm,
    batch: &[TokenSeq],
    draws: &LossDraws,
    objective: Objective,
    train_embeddings: bool,
    dropout: Option<Dropout<'_>>,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let (b, grads, _) = loss_grads_terms(model, batch, draws, objective, train_embeddings, dropout)?;
    Ok((b, grads))
}

/// [`loss_and_grads`] plus the weighted per-sequence diffusion terms.
pub(crate) fn loss_grads_terms(
    model: &DiffusionLm,
    batch: &[TokenSeq],
    draws: &LossDraws,
    objective: Objective,
    train_embeddings: bool,
    dropout: Option<Dropout<'_>>,
) -> Result<(LossBreakdown, Vec<Tensor>, Vec<f64>)> {
    let mut tape = Tape::new();
    let g = record_loss(&mut tape, model, batch, draws, objective, train_embeddings, dropout)?;
    let grads = tape.backward(g.total)?;
    let mut out = g.params.grads(&grads);
    out.push(grads.get(g.embedding));
    Ok((g.breakdown, out, g.per_seq))
}

fn with_param(model: &DiffusionLm, param: Parametrization) -> Result<()> {
    if model.denoiser.config.parametrization != param {
        return Err(DiffLmError::KindMismatch(format!(
            "model is {}-parametrized, loss expects {param}",
            model.denoiser.config.parametrization
        )));
    }
    Ok(())
}

fn sampled(model: &DiffusionLm, batch: &[TokenSeq], rng: &mut impl Rng) -> LossDraws {
    LossDraws::uniform(batch.len(), model.seq_len(), model.latent_dim(), model.sched.steps(), rng)
}

/// Single-step estimate of the simple end-to-end loss, `x0` parametrization.
pub fn loss_e2e_simple_x0(model: &DiffusionLm, batch: &[TokenSeq], rng: &mut impl Rng) -> Result<LossBreakdown> {
    with_param(model, Parametrization::X0)?;
    loss_with_draws(model, batch, &sampled(model, batch, rng), Objective::Simple)
}

/// Posterior-mean matching through the `x0` head.
pub fn loss_mu_param(model: &DiffusionLm, batch: &[TokenSeq], rng: &mut impl Rng) -> Result<LossBreakdown> {
    with_param(model, Parametrization::Mu)?;
    loss_with_draws(model, batch, &sampled(model, batch, rng), Objective::Simple)
}

/// Noise matching.
pub fn loss_eps_param(model: &DiffusionLm, batch: &[TokenSeq], rng: &mut impl Rng) -> Result<LossBreakdown> {
    with_param(model, Parametrization::Eps)?;
    loss_with_draws(model, batch, &sampled(model, batch, rng), Objective::Simple)
}

/// Closed-form per-term losses on given tensors, for `t >= 2`.
pub mod terms {
    use super::*;

    fn sq(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum()
    }

    /// `||x0 - p||^2`.
    pub fn x0_loss(x0: &Tensor, p: &Tensor) -> f64 {
        sq(x0, p)
    }

    /// `||mu(x_t, x0) - mu(x_t, p)||^2`.
    pub fn mu_loss(sched: &Schedule, t: usize, x0: &Tensor, xt: &Tensor, p: &Tensor) -> Result<f64> {
        let pc = posterior_coeffs(sched, t)?;
        Ok(sq(&pc.mean(x0, xt)?, &pc.mean(p, xt)?))
    }

    /// `||eps - eps_hat||^2` where both noises are implied by `x_t` and the
    /// true / predicted `x0`.
    pub fn eps_loss(sched: &Schedule, t: usize, x0: &Tensor, xt: &Tensor, p: &Tensor) -> Result<f64> {
        use crate::diffusion::{eps_x0_convert, Conversion};
        let e = eps_x0_convert(sched, x0, xt, t, Conversion::X0ToEps)?;
        let ehat = eps_x0_convert(sched, p, xt, t, Conversion::X0ToEps)?;
        Ok(sq(&e, &ehat))
    }
}

/// Bound estimate in nats per token with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundEstimate {
    pub nats_per_token: f64,
    pub std_err: f64,
    pub sequences: usize,
    /// Per-token split of the estimate; zero when built by [`ratio_estimate`].
    pub terms: BoundTerms,
}

/// Components of the bound, nats per token.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundTerms {
    /// KL of `q(x_T | x0)` from the standard normal prior.
    pub prior: f64,
    /// Sum of the KL terms for `t >= 2`.
    pub diffusion: f64,
    /// Decoder NLL at `t = 1` plus the log-density of `q(x0 | w)`.
    pub decoder: f64,
    /// `-log p(w | x0)`.
    pub rounding: f64,
}

/// Proposal over `t = 2..=T` proportional to the expected size of each KL
/// term for data of per-coordinate variance `data_var`.
pub fn step_proposal(sched: &Schedule, data_var: f64) -> Vec<f64> {
    let t_max = sched.steps();
    let mut w = vec![0.0; t_max + 1];
    for (t, slot) in w.iter_mut().enumerate().skip(2) {
        *slot = snr_drop(sched, t) / (1.0 / data_var + sched.snr(t));
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Monte-Carlo estimate of the end-to-end variational bound on `-log p(w)`
/// per token (content + END), with `num_t` stratified importance-sampled
/// steps per sequence for the intermediate KL terms.
pub fn nll_bound(model: &DiffusionLm, seqs: &[TokenSeq], num_t: usize, batch: usize, rng: &mut DiffRng) -> Result<BoundEstimate> {
    if seqs.is_empty() {
        return Err(DiffLmError::EmptySet);
    }
    let sched = &model.sched;
    let (n, d) = (model.seq_len(), model.latent_dim());
    let t_max = sched.steps();
    let s0 = model.table.sigma0;
    let nd = (n * d) as f64;
    let w_data = &model.table.weight;
    let data_var = w_data.sq_norm() / w_data.len() as f64 + s0 * s0;
    let proposal = step_proposal(sched, data_var);
    let mut cdf = Vec::with_capacity(t_max + 1);
    let mut acc = 0.0;
    for p in &proposal {
        acc += p;
        cdf.push(acc);
    }
    let draw_t = |u: f64| -> usize { cdf.partition_point(|&c| c < u * acc).clamp(2, t_max) };

    let ab_t = sched.alpha_bar(t_max);
    let prior_kl = |x0: &Tensor| -> f64 {
        if ab_t == 0.0 {
            0.0
        } else {
            0.5 * (ab_t * x0.sq_norm() + nd * prior_gap(ab_t))
        }
    };
    let log_q = -0.5 * nd * (1.0 + (2.0 * PI * s0 * s0).ln());
    let dec_norm = 0.5 * nd * (2.0 * PI * s0 * s0).ln();

    let mut per_seq: Vec<(f64, f64)> = Vec::with_capacity(seqs.len());
    let mut sums = [0.0f64; 4];
    for chunk in seqs.chunks(batch.max(1)) {
        let bsz = chunk.len();
        let ids: Vec<usize> = chunk.iter().flat_map(|w| w.ids().iter().copied()).collect();
        let emb = model.table.embed_ids(&ids)?;
        let noise = normal_matrix(rng, bsz * n, d);
        let x0 = Tensor::matrix(bsz * n, d, emb.data().iter().zip(noise.data()).map(|(e, z)| e + s0 * z).collect())?;
        let seq_rows = |t: &Tensor, b: usize| Tensor::matrix(n, d, t.data()[b * n * d..(b + 1) * n * d].to_vec());

        // Per sequence: [prior, diffusion, decoder, rounding].
        let mut parts = vec![[0.0f64; 4]; bsz];
        for (b, part) in parts.iter_mut().enumerate() {
            let x0b = seq_rows(&x0, b)?;
            part[0] = prior_kl(&x0b);
            part[2] = log_q;
            part[3] = -model.table.rounding_logprob(&x0b, &chunk[b])?;
        }

        // Decoder term at t = 1.
        let x1 = noised(sched, &x0, &vec![1; bsz], n, rng)?;
        let x0hat = predict_x0(&model.denoiser, sched, &x1, &vec![1; bsz])?;
        for (b, part) in parts.iter_mut().enumerate() {
            let err: f64 = (b * n * d..(b + 1) * n * d).map(|i| (x0.data()[i] - x0hat.data()[i]).powi(2)).sum();
            part[2] += dec_norm + err / (2.0 * s0 * s0);
        }

        // Intermediate KLs, stratified over [0, 1).
        if t_max >= 2 {
            for k in 0..num_t {
                let steps: Vec<usize> = (0..bsz).map(|_| draw_t((k as f64 + rng.gen::<f64>()) / num_t as f64)).collect();
                let xt = noised(sched, &x0, &steps, n, rng)?;
                let x0hat = predict_x0(&model.denoiser, sched, &xt, &steps)?;
                for (b, part) in parts.iter_mut().enumerate() {
                    let t = steps[b];
                    let err: f64 = (b * n * d..(b + 1) * n * d).map(|i| (x0.data()[i] - x0hat.data()[i]).powi(2)).sum();
                    part[1] += 0.5 * snr_drop(sched, t) * err / proposal[t] / num_t as f64;
                }
            }
        }
        for (b, part) in parts.into_iter().enumerate() {
            per_seq.push((part.iter().sum(), (chunk[b].content().len() + 1) as f64));
            part.iter().zip(sums.iter_mut()).for_each(|(p, s)| *s += p);
        }
    }
    let tokens: f64 = per_seq.iter().map(|p| p.1).sum();
    let mut est = ratio_estimate(&per_seq);
    est.terms = BoundTerms { prior: sums[0] / tokens, diffusion: sums[1] / tokens, decoder: sums[2] / tokens, rounding: sums[3] / tokens };
    Ok(est)
}

/// `-a - ln(1 - a)`, which is nonnegative; clamped against cancellation.
fn prior_gap(a: f64) -> f64 {
    (-a - (-a).ln_1p()).max(0.0)
}

/// `sum(a) / sum(b)` with a delta-method standard error.
pub fn ratio_estimate(pairs: &[(f64, f64)]) -> BoundEstimate {
    let m = pairs.len();
    let (sa, sb): (f64, f64) = pairs.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let r = sa / sb;
    let resid: f64 = pairs.iter().map(|(a, b)| (a - r * b).powi(2)).sum();
    let se = if m > 1 { (resid * m as f64 / (m - 1) as f64).sqrt() / sb } else { f64::NAN };
    BoundEstimate { nats_per_token: r, std_err: se, sequences: m, terms: BoundTerms::default() }
}

fn noised(sched: &Schedule, x0: &Tensor, steps: &[usize], n: usize, rng: &mut DiffRng) -> Result<Tensor> {
    let d = x0.cols();
    let eps = normal_matrix(rng, x0.rows(), d);
    let mut out = x0.clone();
    for (b, &t) in steps.iter().enumerate() {
        let ab = sched.alpha_bar(t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in b * n * d..(b + 1) * n * d {
            out.data_mut()[i] = sa * x0.data()[i] + sn * eps.data()[i];
        }
    }
    Ok(out)
}

/// Token accuracy of `decode_argmax(sample_x0(w))` over all positions.
pub fn rounding_accuracy(model: &DiffusionLm, seqs: &[TokenSeq], rng: &mut DiffRng) -> Result<f64> {
    if seqs.is_empty() {
        return Err(DiffLmError::EmptySet);
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for w in seqs {
        let x0 = model.table.sample_x0(w, rng)?;
        let ids = model.table.argmax_ids(&x0)?;
        hit += ids.iter().zip(w.ids()).filter(|(a, b)| a == b).count();
        total += w.len();
    }
    Ok(hit as f64 / total as f64)
}

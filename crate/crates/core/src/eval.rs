//! Sample-quality metrics: lm-score under the exact oracle or a trained
//! causal teacher, control success, rank correlation.

use autodiff::{Tape, Tensor};
use rand::Rng;

use crate::control::ControlTask;
use crate::corpus::CorpusSpec;
use crate::embedding::{TokenSeq, PAD};
use crate::error::{DiffLmError, Result};
use crate::nn::{Linear, ParamStore, Trunk, TrunkConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{derive, normal, stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { width: 64, layers: 2, heads: 4, lr: 2e-3, iterations: 1500, batch_size: 32, seed: 0 }
    }
}

/// Small autoregressive transformer over token ids. Position `i` reads the
/// previous token (PAD before the first) and predicts token `i`.
pub struct TeacherLm {
    pub config: TeacherConfig,
    pub seq_len: usize,
    pub vocab: usize,
    pub store: ParamStore,
    tok: crate::nn::ParamId,
    trunk: Trunk,
    head: Linear,
}

impl TeacherLm {
    pub fn new(config: TeacherConfig, vocab: usize, seq_len: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let tok = store.add(
            "teacher.tok",
            Tensor::matrix(vocab, config.width, (0..vocab * config.width).map(|_| 0.02 * normal(rng)).collect())?,
        );
        let trunk = Trunk::new(
            &mut store,
            "teacher",
            TrunkConfig { seq_len, width: config.width, layers: config.layers, heads: config.heads, causal: true, time_conditioned: false },
            rng,
        )?;
        let head = Linear::new(&mut store, "teacher.head", config.width, vocab, 1.0, rng);
        Ok(TeacherLm { config, seq_len, vocab, store, tok, trunk, head })
    }

    /// Summed NLL of the scored positions (content + END of the canonical
    /// form) over a batch, recorded on `tape`, and the token count.
    fn record_nll(&self, tape: &mut Tape, p: &crate::nn::Bound, seqs: &[TokenSeq]) -> Result<(autodiff::Var, usize)> {
        let n = self.seq_len;
        let mut inputs = Vec::with_capacity(seqs.len() * n);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (s, w) in seqs.iter().enumerate() {
            if w.len() != n {
                return Err(DiffLmError::ShapeMismatch(format!("sequence length {} for teacher length {n}", w.len())));
            }
            let c = w.canonical();
            let ids = c.ids();
            if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab) {
                return Err(DiffLmError::IdOutOfRange { id, vocab: self.vocab });
            }
            inputs.push(PAD);
            inputs.extend_from_slice(&ids[..n - 1]);
            let scored = c.content().len() + 1;
            for i in 0..scored {
                rows.push(s * n + i);
                targets.push(ids[i]);
            }
        }
        let h = tape.gather(p.var(self.tok), &inputs)?;
        let h = self.trunk.forward(tape, p, h, None, None)?;
        let h = tape.gather(h, &rows)?;
        let logits = self.head.forward(tape, p, h)?;
        Ok((tape.cross_entropy(logits, &targets)?, targets.len()))
    }

    /// NLL (nats) and scored-token count of each sequence.
    pub fn score(&self, seqs: &[TokenSeq]) -> Result<Vec<(f64, usize)>> {
        seqs.iter()
            .map(|w| {
                let mut tape = Tape::new();
                let p = self.store.bind(&mut tape, false)?;
                let (nll, toks) = self.record_nll(&mut tape, &p, std::slice::from_ref(w))?;
                Ok((tape.value(nll).item(), toks))
            })
            .collect()
    }
}

/// Trains the teacher on `train`; returns the mean per-token training NLL
/// over the last 50 iterations.
pub fn train_teacher(teacher: &mut TeacherLm, train: &[TokenSeq]) -> Result<f64> {
    if train.is_empty() {
        return Err(DiffLmError::EmptySet);
    }
    let cfg = teacher.config;
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() }, &teacher.store.tensors().iter().collect::<Vec<_>>());
    let decay: Vec<bool> = teacher.store.tensors().iter().map(|t| t.shape().len() == 2).collect();
    let mut recent = Vec::new();
    for iter in 0..cfg.iterations {
        let mut rng = stream(derive(cfg.seed, "teacher"), iter as u64);
        let batch: Vec<TokenSeq> = (0..cfg.batch_size).map(|_| train[rng.gen_range(0..train.len())].clone()).collect();
        let mut tape = Tape::new();
        let p = teacher.store.bind(&mut tape, true)?;
        let (nll, toks) = teacher.record_nll(&mut tape, &p, &batch)?;
        let loss = tape.scale(nll, 1.0 / toks as f64)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(DiffLmError::NonFiniteLoss { term: "teacher".into() });
        }
        let grads = p.grads(&tape.backward(loss)?);
        let mut params: Vec<&mut Tensor> = teacher.store.tensors_mut().iter_mut().collect();
        opt.step(&mut params, &grads, cfg.lr, &decay)?;
        recent.push(value);
        if recent.len() > 50 {
            recent.remove(0);
        }
    }
    Ok(recent.iter().sum::<f64>() / recent.len() as f64)
}

pub enum Scorer<'a> {
    Oracle(&'a CorpusSpec),
    Teacher(&'a TeacherLm),
}

/// Mean NLL per token (content + END) of the text each sample spells,
/// pooled over the set.
pub fn lm_score(samples: &[TokenSeq], scorer: &Scorer<'_>) -> Result<f64> {
    if samples.is_empty() {
        return Err(DiffLmError::EmptySet);
    }
    let scored: Vec<(f64, usize)> = match scorer {
        Scorer::Oracle(spec) => samples.iter().map(|w| spec.score_text(w)).collect(),
        Scorer::Teacher(t) => t.score(samples)?,
    };
    let nll: f64 = scored.iter().map(|s| s.0).sum();
    let toks: usize = scored.iter().map(|s| s.1).sum();
    Ok(nll / toks as f64)
}

/// Success rate of `outputs` on `task`. Composite tasks count an output
/// as its worst sub-task score.
pub fn control_success(task: &ControlTask, spec: &CorpusSpec, outputs: &[TokenSeq]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(DiffLmError::EmptySet);
    }
    let targets = task.resolve(spec)?;
    let total: f64 = outputs
        .iter()
        .map(|w| targets.iter().map(|t| t.score(spec, w)).fold(1.0, f64::min))
        .sum();
    Ok(total / outputs.len() as f64)
}

/// Ranks from 1, ties sharing their mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of tie-averaged ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(DiffLmError::ShapeMismatch(format!("spearman over {} and {} values", a.len(), b.len())));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

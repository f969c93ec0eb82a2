//! Single-file checkpoints.
//!
//! Layout: magic `DIFFLMCK`, format version (u32), record count (u64),
//! records sorted by kind then key, trailing SHA-256 of everything before
//! it. A record is a kind byte (1 text, 2 tensor), a u32 key length and
//! key bytes, then either a u64 length and UTF-8 text, or a u32 rank,
//! u64 dims and little-endian f64 data. All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use autodiff::Tensor;
use sha2::{Digest, Sha256};

use crate::control::{ClassifierConfig, ClassifierKind, LatentClassifier};
use crate::corpus::Lexicon;
use crate::denoiser::{DenoiserConfig, Parametrization};
use crate::error::{DiffLmError, Result};
use crate::eval::{TeacherConfig, TeacherLm};
use crate::model::DiffusionLm;
use crate::nn::ParamStore;
use crate::objectives::{LossBreakdown, Objective};
use crate::optim::AdamW;
use crate::rng::seeded;
use crate::schedule::Schedule;
use crate::train::{Precision, StepSampler, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"DIFFLMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn corrupt(msg: impl Into<String>) -> DiffLmError {
    DiffLmError::CorruptFile(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("record runs past end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, wide: bool) -> Result<usize> {
        let n = if wide { self.u64()? } else { u64::from(self.u32()?) };
        usize::try_from(n).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| corrupt("implausible length"))
    }

    fn string(&mut self, wide: bool) -> Result<String> {
        let n = self.len(wide)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid UTF-8"))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&((self.meta.len() + self.tensors.len()) as u64).to_le_bytes());
        let key = |out: &mut Vec<u8>, k: &str| {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
        };
        for (k, v) in &self.meta {
            out.push(1);
            key(&mut out, k);
            out.extend_from_slice(&(v.len() as u64).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        for (k, t) in &self.tensors {
            out.push(2);
            key(&mut out, k);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(DiffLmError::VersionMismatch { found: version, expected: VERSION });
        }
        let count = r.u64()?;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let kind = r.take(1)?[0];
            let k = r.string(false)?;
            match kind {
                1 => {
                    let v = r.string(true)?;
                    if ck.meta.insert(k.clone(), v).is_some() {
                        return Err(corrupt(format!("duplicate key `{k}`")));
                    }
                }
                2 => {
                    let rank = r.u32()? as usize;
                    if rank > 8 {
                        return Err(corrupt("implausible tensor rank"));
                    }
                    let shape = (0..rank).map(|_| r.len(true)).collect::<Result<Vec<_>>>()?;
                    let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("tensor too large"))?;
                    let raw = r.take(len.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?)?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
                    if ck.tensors.insert(k.clone(), t).is_some() {
                        return Err(corrupt(format!("duplicate key `{k}`")));
                    }
                }
                other => return Err(corrupt(format!("unknown record kind {other}"))),
            }
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(ck)
    }

    /// Writes atomically: a sibling temporary file renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| corrupt(format!("missing `{key}`")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.parse().map_err(|_| corrupt(format!("bad value for `{key}`")))
    }

    pub fn tensor(&self, key: &str) -> Result<&Tensor> {
        self.tensors.get(key).ok_or_else(|| corrupt(format!("missing tensor `{key}`")))
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    /// Stores every parameter of `store` under `prefix/<name>`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.names().iter().zip(store.tensors()) {
            self.tensors.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        store.load(|name| self.tensors.get(&format!("{prefix}/{name}")))
    }
}

fn scalars(values: &[f64]) -> Tensor {
    Tensor::new(vec![values.len()], values.to_vec()).expect("1-D")
}

/// Adds the model: schedule, denoiser config, parameters and embeddings.
pub fn put_model(ck: &mut Checkpoint, model: &DiffusionLm) {
    for (k, v) in model.sched.to_kv() {
        ck.meta.insert(k, v);
    }
    let c = &model.denoiser.config;
    ck.set("model.seq_len", c.seq_len);
    ck.set("model.latent_dim", c.latent_dim);
    ck.set("model.width", c.width);
    ck.set("model.layers", c.layers);
    ck.set("model.heads", c.heads);
    ck.set("model.max_step", c.max_step);
    ck.set("model.parametrization", c.parametrization);
    ck.set("model.skip", c.skip);
    ck.set("model.vocab", model.table.vocab_size());
    ck.set("model.sigma0", model.table.sigma0);
    ck.put_store("model", &model.denoiser.store);
    ck.tensors.insert("model/embedding".into(), model.table.weight.clone());
}

pub fn model_from(ck: &Checkpoint) -> Result<DiffusionLm> {
    let sched = Schedule::from_kv(&ck.meta)?;
    let config = DenoiserConfig {
        seq_len: ck.parse("model.seq_len")?,
        latent_dim: ck.parse("model.latent_dim")?,
        width: ck.parse("model.width")?,
        layers: ck.parse("model.layers")?,
        heads: ck.parse("model.heads")?,
        max_step: ck.parse("model.max_step")?,
        parametrization: ck.parse::<Parametrization>("model.parametrization")?,
        skip: ck.parse("model.skip")?,
    };
    let sigma0: f64 = ck.parse("model.sigma0")?;
    let mut model = DiffusionLm::init(config, ck.parse("model.vocab")?, sched, Some(sigma0), &mut seeded(0))?;
    ck.load_store("model", &mut model.denoiser.store)?;
    let emb = ck.tensor("model/embedding")?;
    if emb.shape() != model.table.weight.shape() {
        return Err(corrupt("embedding shape disagrees with config"));
    }
    model.table.weight = emb.clone();
    Ok(model)
}

/// Adds the trainer: config, optimizer moments, counters, step sampler.
pub fn put_trainer(ck: &mut Checkpoint, trainer: &Trainer) {
    let c = &trainer.config;
    ck.set("train.lr", c.lr);
    ck.set("train.beta1", c.beta1);
    ck.set("train.beta2", c.beta2);
    ck.set("train.weight_decay", c.weight_decay);
    ck.set("train.batch_size", c.batch_size);
    ck.set("train.iterations", c.iterations);
    ck.set("train.clip_norm", c.clip_norm);
    ck.set("train.seed", c.seed);
    ck.set("train.objective", c.objective);
    ck.set("train.dropout", c.dropout);
    ck.set("train.train_embeddings", c.train_embeddings);
    ck.set("train.eval_every", c.eval_every);
    ck.set("train.eval_sequences", c.eval_sequences);
    ck.set("train.bound_steps", c.bound_steps);
    ck.set("train.precision", c.precision);
    ck.set("trainer.iter", trainer.iter);
    ck.set("trainer.window_len", trainer.window_len);
    ck.set("trainer.strikes", trainer.strikes);
    ck.set("trainer.opt_t", trainer.opt.t);
    for (i, (m, v)) in trainer.opt.m.iter().zip(&trainer.opt.v).enumerate() {
        ck.tensors.insert(format!("trainer/m/{i:04}"), m.clone());
        ck.tensors.insert(format!("trainer/v/{i:04}"), v.clone());
    }
    ck.tensors.insert("trainer/window".into(), scalars(&trainer.window.values()));
    ck.tensors.insert("trainer/initial_loss".into(), scalars(trainer.initial_loss.as_slice()));
    let lens: Vec<f64> = trainer.sampler.history.iter().map(|h| h.len() as f64).collect();
    let flat: Vec<f64> = trainer.sampler.history.iter().flatten().copied().collect();
    ck.tensors.insert("trainer/history_len".into(), scalars(&lens));
    ck.tensors.insert("trainer/history".into(), scalars(&flat));
}

pub fn train_config_from(ck: &Checkpoint) -> Result<TrainConfig> {
    Ok(TrainConfig {
        lr: ck.parse("train.lr")?,
        beta1: ck.parse("train.beta1")?,
        beta2: ck.parse("train.beta2")?,
        weight_decay: ck.parse("train.weight_decay")?,
        batch_size: ck.parse("train.batch_size")?,
        iterations: ck.parse("train.iterations")?,
        clip_norm: ck.parse("train.clip_norm")?,
        seed: ck.parse("train.seed")?,
        objective: ck.parse::<Objective>("train.objective")?,
        dropout: ck.parse("train.dropout")?,
        train_embeddings: ck.parse("train.train_embeddings")?,
        eval_every: ck.parse("train.eval_every")?,
        eval_sequences: ck.parse("train.eval_sequences")?,
        bound_steps: ck.parse("train.bound_steps")?,
        precision: ck.parse::<Precision>("train.precision")?,
    })
}

pub fn trainer_from(ck: &Checkpoint, model: &DiffusionLm) -> Result<Trainer> {
    let mut trainer = Trainer::new(train_config_from(ck)?, model)?;
    let k = trainer.opt.m.len();
    let load = |prefix: &str| -> Result<Vec<Tensor>> {
        (0..k).map(|i| ck.tensor(&format!("trainer/{prefix}/{i:04}")).cloned()).collect()
    };
    let (m, v) = (load("m")?, load("v")?);
    if m.iter().chain(&v).zip(trainer.opt.m.iter().chain(&trainer.opt.v)).any(|(a, b)| a.shape() != b.shape()) {
        return Err(corrupt("optimizer state disagrees with the model"));
    }
    trainer.opt = AdamW { config: trainer.opt.config, m, v, t: ck.parse("trainer.opt_t")? };
    trainer.iter = ck.parse("trainer.iter")?;
    trainer.window_len = ck.parse("trainer.window_len")?;
    trainer.strikes = ck.parse("trainer.strikes")?;
    let w = ck.tensor("trainer/window")?.data();
    if w.len() != LossBreakdown::TERMS.len() {
        return Err(corrupt("window has the wrong length"));
    }
    trainer.window = LossBreakdown { t_term: w[0], diffusion: w[1], emb_match: w[2], rounding: w[3], total: w[4] };
    trainer.initial_loss = ck.tensor("trainer/initial_loss")?.data().first().copied();
    let lens = ck.tensor("trainer/history_len")?.data();
    let flat = ck.tensor("trainer/history")?.data();
    if lens.len() != trainer.sampler.steps() || lens.iter().sum::<f64>() as usize != flat.len() {
        return Err(corrupt("step history disagrees with the schedule"));
    }
    let mut at = 0;
    trainer.sampler = StepSampler {
        history: lens
            .iter()
            .map(|&l| {
                let h = flat[at..at + l as usize].to_vec();
                at += l as usize;
                h
            })
            .collect(),
    };
    Ok(trainer)
}

/// Adds a latent classifier under `classifier.*`.
pub fn put_classifier(ck: &mut Checkpoint, clf: &LatentClassifier) {
    let c = &clf.config;
    ck.set("classifier.kind", clf.kind);
    ck.set("classifier.seq_len", c.seq_len);
    ck.set("classifier.latent_dim", c.latent_dim);
    ck.set("classifier.width", c.width);
    ck.set("classifier.layers", c.layers);
    ck.set("classifier.heads", c.heads);
    ck.set("classifier.max_step", c.max_step);
    ck.put_store("classifier", &clf.store);
}

pub fn classifier_from(ck: &Checkpoint, lexicon: &Lexicon) -> Result<LatentClassifier> {
    let config = ClassifierConfig {
        seq_len: ck.parse("classifier.seq_len")?,
        latent_dim: ck.parse("classifier.latent_dim")?,
        width: ck.parse("classifier.width")?,
        layers: ck.parse("classifier.layers")?,
        heads: ck.parse("classifier.heads")?,
        max_step: ck.parse("classifier.max_step")?,
    };
    let kind: ClassifierKind = ck.parse("classifier.kind")?;
    let mut clf = LatentClassifier::new(kind, config, lexicon, &mut seeded(0))?;
    ck.load_store("classifier", &mut clf.store)?;
    Ok(clf)
}

/// Adds a teacher language model under `teacher.*`.
pub fn put_teacher(ck: &mut Checkpoint, teacher: &TeacherLm) {
    let c = &teacher.config;
    ck.set("teacher.width", c.width);
    ck.set("teacher.layers", c.layers);
    ck.set("teacher.heads", c.heads);
    ck.set("teacher.lr", c.lr);
    ck.set("teacher.iterations", c.iterations);
    ck.set("teacher.batch_size", c.batch_size);
    ck.set("teacher.seed", c.seed);
    ck.set("teacher.vocab", teacher.vocab);
    ck.set("teacher.seq_len", teacher.seq_len);
    ck.put_store("teacher", &teacher.store);
}

pub fn teacher_from(ck: &Checkpoint) -> Result<TeacherLm> {
    let config = TeacherConfig {
        width: ck.parse("teacher.width")?,
        layers: ck.parse("teacher.layers")?,
        heads: ck.parse("teacher.heads")?,
        lr: ck.parse("teacher.lr")?,
        iterations: ck.parse("teacher.iterations")?,
        batch_size: ck.parse("teacher.batch_size")?,
        seed: ck.parse("teacher.seed")?,
    };
    let mut t = TeacherLm::new(config, ck.parse("teacher.vocab")?, ck.parse("teacher.seq_len")?, &mut seeded(0))?;
    ck.load_store("teacher", &mut t.store)?;
    Ok(t)
}

//! Classifiers over noised latents `log p(c | x_t)`: one trunk of denoiser
//! blocks with a task-specific head.

use std::fmt;
use std::str::FromStr;

use autodiff::{Tape, Tensor, Var};
use rand::Rng;

use crate::corpus::{CorpusSpec, Lexicon, SpanLabel};
use crate::embedding::{EmbeddingTable, TokenSeq};
use crate::error::{DiffLmError, Result};
use crate::nn::{Bound, Linear, ParamStore, Trunk, TrunkConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{derive, normal, stream};
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassifierKind {
    /// Per-position tag softmax.
    Tags,
    /// Label softmax over a token interval.
    Spans,
    /// For every field, a softmax over its values plus "absent".
    Content,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 3] = [ClassifierKind::Tags, ClassifierKind::Spans, ClassifierKind::Content];
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierKind::Tags => "tags",
            ClassifierKind::Spans => "spans",
            ClassifierKind::Content => "content",
        })
    }
}

impl FromStr for ClassifierKind {
    type Err = DiffLmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tags" => Ok(ClassifierKind::Tags),
            "spans" => Ok(ClassifierKind::Spans),
            "content" => Ok(ClassifierKind::Content),
            other => Err(DiffLmError::Parse(format!("unknown classifier kind `{other}`"))),
        }
    }
}

/// What a classifier is asked to score for one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    /// Tag per position (prefix of the sequence), `None` = unconstrained.
    Tags(Vec<Option<usize>>),
    /// Inclusive interval.
    Span { start: usize, end: usize, label: SpanLabel },
    /// `(field, value)`; `None` means the field is absent.
    Content(Vec<(usize, Option<usize>)>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierConfig {
    pub seq_len: usize,
    pub latent_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_step: usize,
}

/// A softmax over a contiguous block of head outputs.
#[derive(Debug, Clone, PartialEq)]
struct Group {
    offset: usize,
    /// Class id for each column; for content groups the last column is "absent".
    classes: Vec<usize>,
}

pub struct LatentClassifier {
    pub kind: ClassifierKind,
    pub config: ClassifierConfig,
    pub store: ParamStore,
    in_proj: Linear,
    trunk: Trunk,
    head: Linear,
    groups: Vec<Group>,
    /// Field of each content group.
    fields: Vec<usize>,
}

const ABSENT: usize = usize::MAX;

impl LatentClassifier {
    /// Shapes depend only on `kind`, `config` and the lexicon, so a
    /// checkpointed classifier can be rebuilt and loaded.
    pub fn new(kind: ClassifierKind, config: ClassifierConfig, lexicon: &Lexicon, rng: &mut impl Rng) -> Result<Self> {
        let (groups, fields) = match kind {
            ClassifierKind::Tags => (vec![Group { offset: 0, classes: (0..lexicon.tag_names.len()).collect() }], vec![]),
            ClassifierKind::Spans => (vec![Group { offset: 0, classes: SpanLabel::ALL.iter().map(|l| l.index()).collect() }], vec![]),
            ClassifierKind::Content => {
                let mut groups = Vec::new();
                let mut fields = Vec::new();
                let mut offset = 0;
                for f in 0..lexicon.field_names.len() {
                    let mut classes = lexicon.field_values(f);
                    classes.push(ABSENT);
                    let size = classes.len();
                    groups.push(Group { offset, classes });
                    fields.push(f);
                    offset += size;
                }
                (groups, fields)
            }
        };
        let outputs: usize = groups.iter().map(|g| g.classes.len()).sum();
        if outputs == 0 {
            return Err(DiffLmError::LabelShapeMismatch(format!("{kind} classifier has no classes")));
        }
        let mut store = ParamStore::new();
        let name = format!("classifier.{kind}");
        let in_proj = Linear::new(&mut store, &format!("{name}.in"), config.latent_dim, config.width, 1.0, rng);
        let trunk = Trunk::new(
            &mut store,
            &name,
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
        let head_in = if kind == ClassifierKind::Spans { 3 * config.width } else { config.width };
        let head = Linear::new(&mut store, &format!("{name}.head"), head_in, outputs, 1.0, rng);
        Ok(LatentClassifier { kind, config, store, in_proj, trunk, head, groups, fields })
    }

    pub fn check_label(&self, label: &Label) -> Result<()> {
        let n = self.config.seq_len;
        match (self.kind, label) {
            (ClassifierKind::Tags, Label::Tags(tags)) => {
                let classes = self.groups[0].classes.len();
                if tags.len() > n || tags.iter().flatten().any(|&t| t >= classes) {
                    return Err(DiffLmError::LabelShapeMismatch(format!("{} tags for length {n} and {classes} classes", tags.len())));
                }
            }
            (ClassifierKind::Spans, &Label::Span { start, end, .. }) => {
                if start > end || end >= n {
                    return Err(DiffLmError::LabelShapeMismatch(format!("span [{start}, {end}] for length {n}")));
                }
            }
            (ClassifierKind::Content, Label::Content(pairs)) => {
                for &(f, v) in pairs {
                    let g = self.fields.iter().position(|&x| x == f).ok_or_else(|| {
                        DiffLmError::LabelShapeMismatch(format!("unknown field {f}"))
                    })?;
                    if let Some(v) = v {
                        if !self.groups[g].classes.contains(&v) {
                            return Err(DiffLmError::LabelShapeMismatch(format!("id {v} is not a value of field {f}")));
                        }
                    }
                }
            }
            (kind, other) => return Err(DiffLmError::LabelShapeMismatch(format!("{kind} classifier given {other:?}"))),
        }
        Ok(())
    }

    /// Records head logits: one row per position (tags) or per sequence.
    fn logits(&self, tape: &mut Tape, p: &Bound, x: Var, steps: &[usize], labels: &[Label]) -> Result<Var> {
        let n = self.config.seq_len;
        let rows = tape.value(x).rows();
        if rows != steps.len() * n || labels.len() != steps.len() || tape.value(x).cols() != self.config.latent_dim {
            return Err(DiffLmError::ShapeMismatch(format!(
                "classifier input {:?} with {} steps and {} labels",
                tape.value(x).shape(),
                steps.len(),
                labels.len()
            )));
        }
        if let Some(&t) = steps.iter().find(|&&t| t > self.config.max_step) {
            return Err(DiffLmError::StepOutOfRange { step: t, min: 0, max: self.config.max_step });
        }
        let h = self.in_proj.forward(tape, p, x)?;
        let h = self.trunk.forward(tape, p, h, Some(steps), None)?;
        let b = steps.len();
        let feats = match self.kind {
            ClassifierKind::Tags => h,
            ClassifierKind::Content => {
                let pool = Tensor::matrix(b, rows, (0..b * rows).map(|i| if (i % rows) / n == i / rows { 1.0 / n as f64 } else { 0.0 }).collect())?;
                let pool = tape.constant(pool)?;
                tape.matmul(pool, h)?
            }
            ClassifierKind::Spans => {
                let mut starts = Vec::with_capacity(b);
                let mut ends = Vec::with_capacity(b);
                let mut pool = vec![0.0; b * rows];
                for (s, label) in labels.iter().enumerate() {
                    let Label::Span { start, end, .. } = *label else { unreachable!("checked") };
                    starts.push(s * n + start);
                    ends.push(s * n + end);
                    for r in start..=end {
                        pool[s * rows + s * n + r] = 1.0 / (end - start + 1) as f64;
                    }
                }
                let hs = tape.gather(h, &starts)?;
                let he = tape.gather(h, &ends)?;
                let pool = tape.constant(Tensor::matrix(b, rows, pool)?)?;
                let mean = tape.matmul(pool, h)?;
                tape.concat_cols(&[hs, he, mean])?
            }
        };
        self.head.forward(tape, p, feats)
    }

    /// One-hot masks (per group) selecting each label's log-probability.
    fn masks(&self, labels: &[Label]) -> Vec<(usize, Vec<f64>)> {
        let n = self.config.seq_len;
        let b = labels.len();
        let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
        match self.kind {
            ClassifierKind::Tags => {
                let c = self.groups[0].classes.len();
                let mut m = vec![0.0; b * n * c];
                for (s, label) in labels.iter().enumerate() {
                    let Label::Tags(tags) = label else { unreachable!("checked") };
                    for (i, t) in tags.iter().enumerate() {
                        if let Some(t) = t {
                            m[(s * n + i) * c + t] = 1.0;
                        }
                    }
                }
                out.push((0, m));
            }
            ClassifierKind::Spans => {
                let c = self.groups[0].classes.len();
                let mut m = vec![0.0; b * c];
                for (s, label) in labels.iter().enumerate() {
                    let Label::Span { label, .. } = label else { unreachable!("checked") };
                    m[s * c + label.index()] = 1.0;
                }
                out.push((0, m));
            }
            ClassifierKind::Content => {
                for (g, group) in self.groups.iter().enumerate() {
                    let c = group.classes.len();
                    let mut m = vec![0.0; b * c];
                    let mut used = false;
                    for (s, label) in labels.iter().enumerate() {
                        let Label::Content(pairs) = label else { unreachable!("checked") };
                        for &(f, v) in pairs {
                            if f == self.fields[g] {
                                let cls = v.unwrap_or(ABSENT);
                                let j = group.classes.iter().position(|&x| x == cls).expect("checked");
                                m[s * c + j] = 1.0;
                                used = true;
                            }
                        }
                    }
                    if used {
                        out.push((g, m));
                    }
                }
            }
        }
        out
    }

    /// Records `sum_s log p(label_s | x_s, t_s)` on `tape`.
    pub fn record_log_prob(&self, tape: &mut Tape, p: &Bound, x: Var, steps: &[usize], labels: &[Label]) -> Result<Var> {
        for l in labels {
            self.check_label(l)?;
        }
        let logits = self.logits(tape, p, x, steps, labels)?;
        let mut total: Option<Var> = None;
        for (g, mask) in self.masks(labels) {
            let group = &self.groups[g];
            let cols = tape.slice_cols(logits, group.offset, group.offset + group.classes.len())?;
            let lp = tape.log_softmax(cols)?;
            let picked = tape.mul_const(lp, mask)?;
            let s = tape.sum(picked)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        match total {
            Some(v) => Ok(v),
            None => Ok(tape.constant(Tensor::scalar(0.0))?),
        }
    }

    /// `sum_s log p(label_s | x_s)` and its gradient with respect to `x`,
    /// weights frozen.
    pub fn log_prob_grad(&self, x: &Tensor, steps: &[usize], labels: &[Label]) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false)?;
        let xv = tape.leaf(x.clone(), true)?;
        let lp = self.record_log_prob(&mut tape, &p, xv, steps, labels)?;
        let value = tape.value(lp).item();
        let grads = tape.backward(lp)?;
        Ok((value, grads.get(xv)))
    }

    /// Fraction of labeled decisions the classifier gets right. Tag
    /// positions whose label is `skip_tag` (padding) are not counted.
    pub fn accuracy(&self, x: &Tensor, steps: &[usize], labels: &[Label], skip_tag: Option<usize>) -> Result<f64> {
        for l in labels {
            self.check_label(l)?;
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let logits = self.logits(&mut tape, &p, xv, steps, labels)?;
        let logits = tape.value(logits);
        let argmax = |row: usize, g: &Group| {
            let r = &logits.row(row)[g.offset..g.offset + g.classes.len()];
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            g.classes[best]
        };
        let n = self.config.seq_len;
        let (mut ok, mut total) = (0usize, 0usize);
        for (s, label) in labels.iter().enumerate() {
            match label {
                Label::Tags(tags) => {
                    for (i, t) in tags.iter().enumerate() {
                        if let Some(t) = *t {
                            if Some(t) != skip_tag {
                                total += 1;
                                ok += usize::from(argmax(s * n + i, &self.groups[0]) == t);
                            }
                        }
                    }
                }
                Label::Span { label, .. } => {
                    total += 1;
                    ok += usize::from(argmax(s, &self.groups[0]) == label.index());
                }
                Label::Content(pairs) => {
                    for &(f, v) in pairs {
                        let g = self.fields.iter().position(|&x| x == f).expect("checked");
                        total += 1;
                        ok += usize::from(argmax(s, &self.groups[g]) == v.unwrap_or(ABSENT));
                    }
                }
            }
        }
        Ok(if total == 0 { 1.0 } else { ok as f64 / total as f64 })
    }
}

/// The training label of `kind` for a corpus sequence. Span labels pick an
/// annotated constituent half the time and a random interval otherwise.
pub fn label_for(kind: ClassifierKind, spec: &CorpusSpec, w: &TokenSeq, rng: &mut impl Rng) -> Label {
    let ann = spec.annotate(w);
    match kind {
        ClassifierKind::Tags => Label::Tags(ann.tags.iter().map(|&t| Some(t)).collect()),
        ClassifierKind::Content => Label::Content(
            (0..spec.lexicon.field_names.len())
                .map(|f| (f, ann.labels.iter().find(|l| l.0 == f).map(|l| l.1)))
                .collect(),
        ),
        ClassifierKind::Spans => {
            if !ann.spans.is_empty() && rng.gen_bool(0.5) {
                let s = ann.spans[rng.gen_range(0..ann.spans.len())];
                return Label::Span { start: s.start, end: s.end, label: s.label };
            }
            let len = ann.length.max(1);
            let a = rng.gen_range(0..len);
            let b = rng.gen_range(0..len);
            let (start, end) = (a.min(b), a.max(b));
            let label = ann.spans.iter().find(|s| s.start == start && s.end == end).map_or(SpanLabel::None, |s| s.label);
            Label::Span { start, end, label }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierTrainConfig {
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the labeled data held out for accuracy reports.
    pub held_out: f64,
    /// Held-out draws per noise band.
    pub eval_sequences: usize,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig { lr: 1e-3, iterations: 1500, batch_size: 32, seed: 0, held_out: 0.1, eval_sequences: 256 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierReport {
    /// Held-out accuracy at `t = 1`.
    pub clean_accuracy: f64,
    /// Held-out accuracy for `t` uniform in each quarter of `[1, T]`.
    pub band_accuracy: [f64; 4],
    /// Mean training NLL per sequence over the last 50 iterations.
    pub final_nll: f64,
}

/// Latents `q(x_t | Emb(w))` for a batch, one step per sequence.
fn noised(table: &EmbeddingTable, sched: &Schedule, seqs: &[&TokenSeq], steps: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
    let n = seqs[0].len();
    let d = table.dim();
    let mut data = Vec::with_capacity(seqs.len() * n * d);
    for (w, &t) in seqs.iter().zip(steps) {
        let e = table.embed(w)?;
        let ab = sched.alpha_bar(t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        data.extend(e.data().iter().map(|&v| sa * v + sn * normal(rng)));
    }
    Ok(Tensor::matrix(seqs.len() * n, d, data)?)
}

/// Trains `clf` on `(sequence, label)` pairs with latents from the frozen
/// table, `t` uniform in `[1, T]` of the base schedule.
pub fn train_latent_classifier(
    clf: &mut LatentClassifier,
    data: &[(TokenSeq, Label)],
    table: &EmbeddingTable,
    sched: &Schedule,
    cfg: &ClassifierTrainConfig,
    skip_tag: Option<usize>,
) -> Result<ClassifierReport> {
    if data.is_empty() {
        return Err(DiffLmError::EmptySet);
    }
    let n = clf.config.seq_len;
    for (w, l) in data {
        clf.check_label(l)?;
        if w.len() != n {
            return Err(DiffLmError::LabelShapeMismatch(format!("sequence of length {} for classifier length {n}", w.len())));
        }
    }
    if sched.base_steps() != clf.config.max_step || sched.stride() != 1 {
        return Err(DiffLmError::InvalidParams("classifier trains on the full base schedule".into()));
    }
    let held = ((data.len() as f64 * cfg.held_out).round() as usize).min(data.len() - 1);
    let (train, dev) = data.split_at(data.len() - held);
    let dev = if dev.is_empty() { train } else { dev };
    let t_max = sched.steps();
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() }, &clf.store.tensors().iter().collect::<Vec<_>>());
    let decay: Vec<bool> = clf.store.tensors().iter().map(|t| t.shape().len() == 2).collect();
    let mut recent = Vec::new();
    for iter in 0..cfg.iterations {
        let mut rng = stream(derive(cfg.seed, "classifier"), iter as u64);
        let batch: Vec<&(TokenSeq, Label)> = (0..cfg.batch_size).map(|_| &train[rng.gen_range(0..train.len())]).collect();
        let steps: Vec<usize> = batch.iter().map(|_| rng.gen_range(1..=t_max)).collect();
        let seqs: Vec<&TokenSeq> = batch.iter().map(|b| &b.0).collect();
        let labels: Vec<Label> = batch.iter().map(|b| b.1.clone()).collect();
        let x = noised(table, sched, &seqs, &steps, &mut rng)?;
        let mut tape = Tape::new();
        let p = clf.store.bind(&mut tape, true)?;
        let xv = tape.constant(x)?;
        let lp = clf.record_log_prob(&mut tape, &p, xv, &steps, &labels)?;
        let loss = tape.scale(lp, -1.0 / batch.len() as f64)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(DiffLmError::NonFiniteLoss { term: "classifier".into() });
        }
        let grads = p.grads(&tape.backward(loss)?);
        let mut params: Vec<&mut Tensor> = clf.store.tensors_mut().iter_mut().collect();
        opt.step(&mut params, &grads, cfg.lr, &decay)?;
        recent.push(value);
        if recent.len() > 50 {
            recent.remove(0);
        }
    }
    let final_nll = if recent.is_empty() { f64::NAN } else { recent.iter().sum::<f64>() / recent.len() as f64 };

    let mut rng = stream(derive(cfg.seed, "classifier/eval"), 0);
    let eval = |lo: usize, hi: usize, rng: &mut crate::rng::DiffRng| -> Result<f64> {
        let (mut acc, mut count) = (0.0, 0);
        let mut start = 0;
        while start < cfg.eval_sequences {
            let b = 64.min(cfg.eval_sequences - start);
            let pick: Vec<&(TokenSeq, Label)> = (0..b).map(|i| &dev[(start + i) % dev.len()]).collect();
            let steps: Vec<usize> = pick.iter().map(|_| rng.gen_range(lo..=hi)).collect();
            let seqs: Vec<&TokenSeq> = pick.iter().map(|p| &p.0).collect();
            let labels: Vec<Label> = pick.iter().map(|p| p.1.clone()).collect();
            let x = noised(table, sched, &seqs, &steps, rng)?;
            acc += clf.accuracy(&x, &steps, &labels, skip_tag)? * b as f64;
            count += b;
            start += b;
        }
        Ok(acc / count.max(1) as f64)
    };
    let clean_accuracy = eval(1, 1, &mut rng)?;
    let mut band_accuracy = [0.0; 4];
    for (q, slot) in band_accuracy.iter_mut().enumerate() {
        let lo = 1 + q * t_max / 4;
        let hi = ((q + 1) * t_max / 4).max(lo);
        *slot = eval(lo, hi, &mut rng)?;
    }
    Ok(ClassifierReport { clean_accuracy, band_accuracy, final_nll })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::presets::restaurants;
    use crate::rng::{normal_matrix, seeded};

    fn config() -> ClassifierConfig {
        ClassifierConfig { seq_len: 16, latent_dim: 4, width: 8, layers: 1, heads: 2, max_step: 10 }
    }

    #[test]
    fn labels_are_shape_checked() {
        let spec = restaurants(16);
        let clf = LatentClassifier::new(ClassifierKind::Spans, config(), &spec.lexicon, &mut seeded(0)).unwrap();
        assert!(clf.check_label(&Label::Span { start: 2, end: 1, label: SpanLabel::Np }).is_err());
        assert!(clf.check_label(&Label::Span { start: 2, end: 16, label: SpanLabel::Np }).is_err());
        assert!(clf.check_label(&Label::Tags(vec![Some(0)])).is_err());
        let content = LatentClassifier::new(ClassifierKind::Content, config(), &spec.lexicon, &mut seeded(0)).unwrap();
        let food = spec.lexicon.field_id("food").unwrap();
        let thai = spec.vocab.id("thai");
        let pub_ = spec.vocab.id("pub");
        assert!(content.check_label(&Label::Content(vec![(food, Some(thai))])).is_ok());
        assert!(content.check_label(&Label::Content(vec![(food, Some(pub_))])).is_err());
    }

    #[test]
    fn group_log_probs_are_normalized() {
        // Summing p over every value of one field (absent included) gives 1.
        let spec = restaurants(16);
        let clf = LatentClassifier::new(ClassifierKind::Content, config(), &spec.lexicon, &mut seeded(1)).unwrap();
        let x = normal_matrix(&mut seeded(2), 16, 4);
        let food = spec.lexicon.field_id("food").unwrap();
        let mut total = clf.log_prob_grad(&x, &[5], &[Label::Content(vec![(food, None)])]).unwrap().0.exp();
        for v in spec.lexicon.field_values(food) {
            total += clf.log_prob_grad(&x, &[5], &[Label::Content(vec![(food, Some(v))])]).unwrap().0.exp();
        }
        assert!((total - 1.0).abs() < 1e-12);
    }
}

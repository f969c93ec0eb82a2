//! Building blocks shared by the commands and the acceptance suite.

use std::fs;
use std::path::Path;

use difflm::checkpoint::{self, Checkpoint};
use difflm::control::{
    guidance_objective, label_for, train_latent_classifier, ClassifierConfig, ClassifierGuide, ClassifierKind, ClassifierReport,
    ClassifierTrainConfig, Guide, Label, LatentClassifier,
};
use difflm::corpus::{presets, CorpusSpec, OracleCorpus, Split, SplitSizes};
use difflm::denoiser::{DenoiserConfig, Parametrization};
use difflm::embedding::{TokenSeq, PAD};
use difflm::eval::{lm_score, Scorer, TeacherConfig};
use difflm::model::DiffusionLm;
use difflm::objectives::{loss_and_grads, loss_with_draws, LossDraws, Objective};
use difflm::rng::{derive, normal_matrix, seeded};
use difflm::sampler::{generate, SampleConfig};
use difflm::schedule::{Schedule, ScheduleKind, ScheduleParams};
use difflm::train::{MetricsRecord, TrainConfig, Trainer};
use difflm::Result;
use rand::Rng;

use crate::config::Config;

pub fn corpus_spec(preset: &str, seq_len: usize, noise: Option<f64>) -> Result<CorpusSpec> {
    let mut spec = presets::by_name(preset, seq_len)?;
    if let Some(n) = noise {
        spec.noise = n;
        spec.validate()?;
    }
    Ok(spec)
}

pub fn config_spec(cfg: &Config) -> Result<CorpusSpec> {
    corpus_spec(&cfg.corpus.preset, cfg.corpus.seq_len, cfg.corpus.noise)
}

pub fn sizes(cfg: &Config) -> SplitSizes {
    SplitSizes { train: cfg.corpus.train, dev: cfg.corpus.dev, test: cfg.corpus.test }
}

/// The corpus directory of `paths.corpus`, or a fresh draw from the preset.
pub fn corpus(cfg: &Config) -> Result<OracleCorpus> {
    corpus_for(cfg, config_spec(cfg)?)
}

/// As [`corpus`], for a spec recovered from a checkpoint.
pub fn corpus_for(cfg: &Config, spec: CorpusSpec) -> Result<OracleCorpus> {
    match &cfg.paths.corpus {
        Some(dir) => {
            let read = |s: Split| -> Result<Vec<TokenSeq>> {
                OracleCorpus::parse_split(&spec, &fs::read_to_string(dir.join(format!("{}.txt", s.name())))?)
            };
            Ok(OracleCorpus { train: read(Split::Train)?, dev: read(Split::Dev)?, test: read(Split::Test)?, spec })
        }
        None => spec.generate(derive(cfg.seed, "corpus"), sizes(cfg)),
    }
}

pub fn schedule(cfg: &Config) -> Result<Schedule> {
    let kind: ScheduleKind = cfg.sched.kind.parse()?;
    Schedule::build(kind, cfg.sched.steps, cfg.sched_params())
}

pub fn denoiser_config(cfg: &Config) -> Result<DenoiserConfig> {
    let m = &cfg.model;
    Ok(DenoiserConfig {
        seq_len: cfg.corpus.seq_len,
        latent_dim: m.latent_dim,
        width: m.width,
        layers: m.layers,
        heads: m.heads,
        max_step: cfg.sched.steps,
        parametrization: m.parametrization.parse()?,
        skip: m.skip,
    })
}

pub fn init_model(cfg: &Config, spec: &CorpusSpec) -> Result<DiffusionLm> {
    DiffusionLm::init(denoiser_config(cfg)?, spec.vocab_size(), schedule(cfg)?, cfg.model.sigma0, &mut seeded(derive(cfg.seed, "init")))
}

/// A model checkpoint also records the corpus it was trained on, so that
/// downstream commands can rebuild the oracle.
pub fn save_model(path: &Path, model: &DiffusionLm, trainer: Option<&Trainer>, spec: &CorpusSpec) -> Result<()> {
    let mut ck = Checkpoint::default();
    checkpoint::put_model(&mut ck, model);
    if let Some(t) = trainer {
        checkpoint::put_trainer(&mut ck, t);
    }
    ck.set("corpus.preset", &spec.name);
    ck.set("corpus.seq_len", spec.seq_len);
    ck.set("corpus.noise", spec.noise);
    ck.save(path)
}

pub fn load_model(path: &Path) -> Result<(DiffusionLm, CorpusSpec, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let model = checkpoint::model_from(&ck)?;
    let spec = corpus_spec(ck.get("corpus.preset")?, ck.parse("corpus.seq_len")?, Some(ck.parse("corpus.noise")?))?;
    Ok((model, spec, ck))
}

/// Trains to completion, handing every metrics record to `on_record`.
pub fn train_model(
    model: &mut DiffusionLm,
    trainer: &mut Trainer,
    corpus: &OracleCorpus,
    on_record: impl FnMut(&MetricsRecord, &Trainer, &DiffusionLm) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    trainer.run(model, &corpus.train, &corpus.dev, on_record)
}

/// The training schedule thinned to every `stride`-th step.
pub fn sampling_schedule(model: &DiffusionLm, stride: usize) -> Result<Schedule> {
    model.sched.downsample(stride)
}

pub fn sample_and_score(model: &DiffusionLm, spec: &CorpusSpec, stride: usize, sample: &SampleConfig, count: usize) -> Result<(Vec<TokenSeq>, f64)> {
    let sched = sampling_schedule(model, stride)?;
    let seqs = generate(&model.denoiser, &model.table, &sched, sample, count)?.seqs;
    let score = lm_score(&seqs, &Scorer::Oracle(spec))?;
    Ok((seqs, score))
}

pub fn classifier_config(cfg: &Config, model: &DiffusionLm) -> ClassifierConfig {
    let c = &cfg.classifier;
    ClassifierConfig {
        seq_len: model.seq_len(),
        latent_dim: model.latent_dim(),
        width: c.width,
        layers: c.layers,
        heads: c.heads,
        max_step: model.sched.base_steps(),
    }
}

/// Trains one latent classifier on the training split against the
/// model's (frozen) embeddings.
pub fn train_classifier(
    kind: ClassifierKind,
    cfg: &Config,
    model: &DiffusionLm,
    corpus: &OracleCorpus,
) -> Result<(LatentClassifier, ClassifierReport)> {
    let spec = &corpus.spec;
    let seed = derive(cfg.seed, &format!("classifier/{kind}"));
    let mut clf = LatentClassifier::new(kind, classifier_config(cfg, model), &spec.lexicon, &mut seeded(seed))?;
    let mut rng = seeded(derive(seed, "labels"));
    let data: Vec<(TokenSeq, Label)> = corpus.train.iter().map(|w| (w.clone(), label_for(kind, spec, w, &mut rng))).collect();
    let c = &cfg.classifier;
    let tc = ClassifierTrainConfig {
        lr: c.lr,
        iterations: c.iterations,
        batch_size: c.batch_size,
        seed,
        held_out: c.held_out,
        eval_sequences: c.eval_sequences,
    };
    let skip_tag = spec.lexicon.tag_id("PAD").filter(|_| kind == ClassifierKind::Tags);
    let report = train_latent_classifier(&mut clf, &data, &model.table, &model.sched, &tc, skip_tag)?;
    Ok((clf, report))
}

pub fn teacher_config(cfg: &Config) -> TeacherConfig {
    let e = &cfg.eval;
    TeacherConfig {
        width: e.teacher_width,
        layers: e.teacher_layers,
        heads: e.teacher_heads,
        lr: e.teacher_lr,
        iterations: e.teacher_iterations,
        batch_size: 32,
        seed: derive(cfg.seed, "teacher"),
    }
}

/// One finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradLine {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn micro_model(param: Parametrization) -> Result<DiffusionLm> {
    let sched = Schedule::build(ScheduleKind::Sqrt, 30, ScheduleParams::default())?;
    let config = DenoiserConfig { seq_len: 4, latent_dim: 3, width: 8, layers: 1, heads: 2, max_step: 30, parametrization: param, skip: true };
    DiffusionLm::init(config, 6, sched, Some(0.3), &mut seeded(21))
}

fn loss_check(param: Parametrization, objective: Objective, eps: f64) -> Result<GradLine> {
    let m = micro_model(param)?;
    let mut rng = seeded(11);
    let seqs: Vec<TokenSeq> = (0..3)
        .map(|_| {
            let len = rng.gen_range(0..4);
            let content: Vec<usize> = (0..len).map(|_| rng.gen_range(2..6)).collect();
            TokenSeq::from_content(&content, 4)
        })
        .collect::<Result<_>>()?;
    let draws = LossDraws::with_steps(vec![1, 7, 30], vec![1.0 / 30.0; 3], 4, 3, &mut rng);
    let (_, grads) = loss_and_grads(&m, &seqs, &draws, objective, true, None)?;
    let (mut worst, mut checked) = (0f64, 0);
    for ti in 0..grads.len() {
        let len = grads[ti].len();
        for k in (0..len).step_by((len / 5).max(1)) {
            let mut probe = m.clone();
            let orig = probe.tensors()[ti].data()[k];
            probe.tensors_mut()[ti].data_mut()[k] = orig + eps;
            let up = loss_with_draws(&probe, &seqs, &draws, objective)?.total;
            probe.tensors_mut()[ti].data_mut()[k] = orig - eps;
            let down = loss_with_draws(&probe, &seqs, &draws, objective)?.total;
            worst = worst.max(rel(grads[ti].data()[k], (up - down) / (2.0 * eps)));
            checked += 1;
        }
    }
    Ok(GradLine { name: format!("loss/{objective}/{param}"), max_rel_error: worst, checked })
}

fn guidance_check(kind: ClassifierKind, eps: f64) -> Result<GradLine> {
    let spec = presets::restaurants(8);
    let config = ClassifierConfig { seq_len: 8, latent_dim: 4, width: 8, layers: 1, heads: 2, max_step: 40 };
    let clf = LatentClassifier::new(kind, config, &spec.lexicon, &mut seeded(3))?;
    let mut rng = seeded(4);
    let w = spec.sample(&mut rng);
    let guide = ClassifierGuide { classifier: &clf, label: label_for(kind, &spec, &w, &mut rng) };
    let guides: [&dyn Guide; 1] = [&guide];
    let x = normal_matrix(&mut rng, 8, 4);
    let mean = normal_matrix(&mut rng, 8, 4);
    let (lambda, var, step) = (0.3, 0.4, 17);
    let (_, grad) = guidance_objective(&guides, lambda, &mean, var, &x, step, 8)?;
    let mut worst = 0f64;
    for i in 0..x.len() {
        let (mut up, mut down) = (x.clone(), x.clone());
        up.data_mut()[i] += eps;
        down.data_mut()[i] -= eps;
        let fu = guidance_objective(&guides, lambda, &mean, var, &up, step, 8)?.0;
        let fd = guidance_objective(&guides, lambda, &mean, var, &down, step, 8)?.0;
        worst = worst.max(rel(grad[i], (fu - fd) / (2.0 * eps)));
    }
    Ok(GradLine { name: format!("guidance/{kind}"), max_rel_error: worst, checked: x.len() })
}

/// Finite-difference checks of every training loss (each objective and
/// parametrization) and of the guidance objective with each classifier.
pub fn gradcheck_suite(eps: f64) -> Result<Vec<GradLine>> {
    let mut out = Vec::new();
    for objective in [Objective::Simple, Objective::Vlb] {
        for param in [Parametrization::X0, Parametrization::Mu, Parametrization::Eps] {
            out.push(loss_check(param, objective, eps)?);
        }
    }
    for kind in ClassifierKind::ALL {
        out.push(guidance_check(kind, eps)?);
    }
    Ok(out)
}

/// Trains a model under `cfg` for the ablation grid and scores samples.
pub fn ablation_arm(cfg: &Config, corpus: &OracleCorpus, count: usize) -> Result<(f64, f64)> {
    let mut model = init_model(cfg, &corpus.spec)?;
    let tc: TrainConfig = TrainConfig { bound_steps: 0, ..train_config(cfg) };
    let mut trainer = Trainer::new(tc, &model)?;
    let records = train_model(&mut model, &mut trainer, corpus, |_, _, _| Ok(()))?;
    let sample = SampleConfig { seed: derive(cfg.seed, "sample"), ..sample_config(cfg) };
    let (_, score) = sample_and_score(&model, &corpus.spec, cfg.sample.stride, &sample, count)?;
    Ok((score, records.last().map_or(f64::NAN, |r| r.loss.total)))
}

/// Library configs from an already validated [`Config`].
pub fn train_config(cfg: &Config) -> TrainConfig {
    cfg.train_config(derive(cfg.seed, "train")).expect("validated config")
}

pub fn sample_config(cfg: &Config) -> SampleConfig {
    cfg.sample_config(derive(cfg.seed, "sample")).expect("validated config")
}

/// Content (non-reserved) ids spelled by whitespace-separated words.
pub fn encode_words(spec: &CorpusSpec, text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|t| spec.vocab.lookup(t).ok_or_else(|| difflm::DiffLmError::Parse(format!("unknown token `{t}`"))))
        .collect()
}

/// Space-joined words of the canonical content.
pub fn render(spec: &CorpusSpec, w: &TokenSeq) -> String {
    spec.vocab.detokenize(&w.canonical())
}

/// Parses one rendered sample back into a sequence.
pub fn parse_sample(spec: &CorpusSpec, line: &str) -> Result<TokenSeq> {
    TokenSeq::from_content(&encode_words(spec, line)?, spec.seq_len)
}

/// Unigram-fill baseline for infilling: every middle slot takes the most
/// frequent content token.
pub fn unigram_fill(spec: &CorpusSpec) -> usize {
    let counts = spec.expected_counts();
    (0..counts.len()).filter(|&i| i != PAD && i != difflm::embedding::END).max_by(|&a, &b| counts[a].total_cmp(&counts[b])).unwrap_or(0)
}

//! Run configuration: a TOML file with one section per module, patched by
//! `--override section.key=value`. Unknown keys are errors everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use difflm::control::{ClassifierKind, ControlTask, GuidanceConfig};
use difflm::denoiser::Parametrization;
use difflm::objectives::Objective;
use difflm::sampler::{ClampMode, ResampleMode, SampleConfig};
use difflm::schedule::{ScheduleKind, ScheduleParams};
use difflm::train::{Precision, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// 64, or 32 to round parameters to single precision after each update.
    pub precision: u32,
    pub corpus: CorpusSection,
    pub sched: SchedSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub classifier: ClassifierSection,
    pub control: ControlSection,
    pub infill: InfillSection,
    pub eval: EvalSection,
    pub gradcheck: GradcheckSection,
    pub ablate: AblateSection,
    pub paths: PathsSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            precision: 64,
            corpus: CorpusSection::default(),
            sched: SchedSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
            classifier: ClassifierSection::default(),
            control: ControlSection::default(),
            infill: InfillSection::default(),
            eval: EvalSection::default(),
            gradcheck: GradcheckSection::default(),
            ablate: AblateSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub preset: String,
    pub seq_len: usize,
    /// Background mixture weight; the preset's default when absent.
    pub noise: Option<f64>,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { preset: "restaurants".into(), seq_len: 16, noise: None, train: 5000, dev: 200, test: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedSection {
    pub kind: String,
    pub steps: usize,
    pub s: f64,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for SchedSection {
    fn default() -> Self {
        let p = ScheduleParams::default();
        SchedSection { kind: "sqrt".into(), steps: 2000, s: p.s, beta_start: p.beta_start, beta_end: p.beta_end }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub parametrization: String,
    pub skip: bool,
    /// Std of `q(x0 | w)`; the schedule's initial std when absent.
    pub sigma0: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { latent_dim: 16, width: 64, layers: 2, heads: 4, parametrization: "x0".into(), skip: true, sigma0: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub objective: String,
    pub dropout: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub train_embeddings: bool,
    pub eval_every: usize,
    pub eval_sequences: usize,
    pub bound_steps: usize,
    /// Halt (resumably) once this many iterations are done.
    pub stop_at: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            lr: 2e-3,
            batch_size: d.batch_size,
            iterations: d.iterations,
            objective: d.objective.to_string(),
            dropout: 0.0,
            weight_decay: d.weight_decay,
            clip_norm: d.clip_norm,
            train_embeddings: d.train_embeddings,
            eval_every: d.eval_every,
            eval_sequences: d.eval_sequences,
            bound_steps: d.bound_steps,
            stop_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub count: usize,
    /// Decoding uses every `stride`-th step of the training schedule.
    pub stride: usize,
    pub clamp: String,
    pub resample: String,
    pub batch_size: usize,
    pub noise_scale: f64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { count: 500, stride: 10, clamp: "always".into(), resample: "marginal".into(), batch_size: 64, noise_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub kinds: Vec<String>,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub held_out: f64,
    pub eval_sequences: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            kinds: ClassifierKind::ALL.iter().map(|k| k.to_string()).collect(),
            width: 64,
            layers: 2,
            heads: 4,
            lr: 1e-3,
            iterations: 1500,
            batch_size: 32,
            held_out: 0.1,
            eval_sequences: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    /// Inline tasks, one per entry, in the task-file syntax.
    pub tasks: Vec<String>,
    /// Samples per task.
    pub k: usize,
    pub lambda: f64,
    pub inner_steps: usize,
    pub lr: f64,
}

impl Default for ControlSection {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        ControlSection { tasks: Vec::new(), k: 50, lambda: g.lambda, inner_steps: g.inner_steps, lr: g.lr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfillSection {
    pub left: String,
    pub right: String,
    pub middle: Option<usize>,
    /// Candidates before minimum-risk selection.
    pub k: usize,
}

impl Default for InfillSection {
    fn default() -> Self {
        InfillSection { left: String::new(), right: String::new(), middle: None, k: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Also score with a trained causal teacher.
    pub teacher: bool,
    pub teacher_width: usize,
    pub teacher_layers: usize,
    pub teacher_heads: usize,
    pub teacher_lr: f64,
    pub teacher_iterations: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { teacher: false, teacher_width: 64, teacher_layers: 2, teacher_heads: 4, teacher_lr: 2e-3, teacher_iterations: 1500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub eps: f64,
    pub tol: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection { eps: 1e-5, tol: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    /// `parametrization`, `embeddings`, `lambda` or `lr`.
    pub study: String,
    pub dims: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub lrs: Vec<f64>,
    /// Training iterations per ablation arm.
    pub iterations: usize,
    /// Samples scored per arm.
    pub samples: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            study: "parametrization".into(),
            dims: vec![16, 64],
            lambdas: vec![0.1, 0.01, 0.001, 0.0005],
            lrs: vec![0.05, 0.1, 0.15, 0.2],
            iterations: 3000,
            samples: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Directory written by `gen-corpus`; the corpus is regenerated from
    /// the preset and seed when absent.
    pub corpus: Option<PathBuf>,
    pub model: Option<PathBuf>,
    /// Training checkpoint to continue from.
    pub resume: Option<PathBuf>,
    pub classifiers: Vec<PathBuf>,
    /// Task file for `control`.
    pub tasks: Option<PathBuf>,
    /// Text file of samples, one per line, for `eval`.
    pub samples: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `dotted` in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| config_err(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("override key `{key}` is malformed")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| config_err(format!("override `{key}`: `{part}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), literal(raw.trim()));
    Ok(())
}

impl Config {
    /// File (if any) plus overrides, validated.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| config_err(format!("{}: {}", p.display(), one_line(&e.to_string()))))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| config_err(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every enumerated string and range that the library would
    /// otherwise reject mid-run.
    pub fn validate(&self) -> Result<(), CliError> {
        self.precision()?;
        self.sched_kind()?;
        self.parametrization()?;
        self.objective()?;
        self.sample_config(0)?;
        self.classifier_kinds()?;
        self.control_tasks()?;
        self.train_config(0)?.validate().map_err(|e| config_err(e.to_string()))?;
        self.guidance().validate().map_err(|e| config_err(e.to_string()))?;
        difflm::corpus::presets::by_name(&self.corpus.preset, self.corpus.seq_len).map_err(|e| config_err(e.to_string()))?;
        if let Some(noise) = self.corpus.noise {
            if !(0.0..1.0).contains(&noise) {
                return Err(config_err(format!("corpus.noise {noise} not in [0, 1)")));
            }
        }
        if self.sched.steps == 0 || self.sample.stride == 0 || self.sched.steps % self.sample.stride != 0 {
            return Err(config_err(format!("sample.stride {} must divide sched.steps {}", self.sample.stride, self.sched.steps)));
        }
        if self.model.latent_dim == 0 || self.model.heads == 0 || self.model.width % self.model.heads != 0 {
            return Err(config_err("model.width must be a positive multiple of model.heads"));
        }
        if !["parametrization", "embeddings", "lambda", "lr"].contains(&self.ablate.study.as_str()) {
            return Err(config_err(format!("unknown ablate.study `{}`", self.ablate.study)));
        }
        if self.sample.count == 0 || self.control.k == 0 || self.infill.k == 0 {
            return Err(config_err("sample.count, control.k and infill.k must be positive"));
        }
        Ok(())
    }

    pub fn precision(&self) -> Result<Precision, CliError> {
        self.precision.to_string().parse().map_err(|e: difflm::DiffLmError| config_err(e.to_string()))
    }

    pub fn sched_kind(&self) -> Result<ScheduleKind, CliError> {
        match self.sched.kind.parse() {
            Ok(ScheduleKind::Custom) => Err(config_err("sched.kind custom cannot be configured from a file")),
            Ok(k) => Ok(k),
            Err(e) => Err(config_err(e.to_string())),
        }
    }

    pub fn sched_params(&self) -> ScheduleParams {
        ScheduleParams { s: self.sched.s, beta_start: self.sched.beta_start, beta_end: self.sched.beta_end }
    }

    pub fn parametrization(&self) -> Result<Parametrization, CliError> {
        self.model.parametrization.parse().map_err(|e: difflm::DiffLmError| config_err(e.to_string()))
    }

    pub fn objective(&self) -> Result<Objective, CliError> {
        self.train.objective.parse().map_err(|e: difflm::DiffLmError| config_err(e.to_string()))
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        Ok(TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            iterations: t.iterations,
            objective: self.objective()?,
            dropout: t.dropout,
            weight_decay: t.weight_decay,
            clip_norm: t.clip_norm,
            train_embeddings: t.train_embeddings,
            eval_every: t.eval_every,
            eval_sequences: t.eval_sequences,
            bound_steps: t.bound_steps,
            precision: self.precision()?,
            seed,
            ..TrainConfig::default()
        })
    }

    pub fn sample_config(&self, seed: u64) -> Result<SampleConfig, CliError> {
        let s = &self.sample;
        let clamp: ClampMode = s.clamp.parse().map_err(|e: difflm::DiffLmError| config_err(e.to_string()))?;
        let resample: ResampleMode = s.resample.parse().map_err(|e: difflm::DiffLmError| config_err(e.to_string()))?;
        if s.batch_size == 0 || !(s.noise_scale >= 0.0) {
            return Err(config_err("sample.batch_size must be positive and sample.noise_scale nonnegative"));
        }
        Ok(SampleConfig { clamp, resample, seed, batch_size: s.batch_size, noise_scale: s.noise_scale })
    }

    pub fn guidance(&self) -> GuidanceConfig {
        let c = &self.control;
        GuidanceConfig { lambda: c.lambda, inner_steps: c.inner_steps, lr: c.lr, stride: self.sample.stride }
    }

    pub fn classifier_kinds(&self) -> Result<Vec<ClassifierKind>, CliError> {
        self.classifier.kinds.iter().map(|k| k.parse().map_err(|e: difflm::DiffLmError| config_err(e.to_string()))).collect()
    }

    pub fn control_tasks(&self) -> Result<Vec<ControlTask>, CliError> {
        self.control
            .tasks
            .iter()
            .map(|t| {
                let task: ControlTask = t.parse().map_err(|e: difflm::DiffLmError| config_err(format!("task `{t}`: {e}")))?;
                task.validate().map_err(|e| config_err(format!("task `{t}`: {e}")))?;
                Ok(task)
            })
            .collect()
    }
}

pub fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

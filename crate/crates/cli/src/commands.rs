//! One function per subcommand. Each writes its artifacts under `out`.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use difflm::checkpoint::{self, Checkpoint};
use difflm::control::{parse_tasks, ControlTask, Controller, LatentClassifier};
use difflm::corpus::{CorpusSpec, Split};
use difflm::eval::{control_success, lm_score, train_teacher, Scorer, TeacherLm};
use difflm::rng::{derive, seeded};
use difflm::train::Trainer;
use difflm::Result;

use crate::config::Config;
use crate::experiment as ex;
use crate::Command;

/// Appends lines and flushes each one, so an interrupted run keeps what
/// it had.
struct Stream(File);

impl Stream {
    fn create(path: &Path, append: bool) -> Result<Self> {
        Ok(Stream(OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?))
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.0, "{s}")?;
        self.0.flush()?;
        Ok(())
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| difflm::DiffLmError::InvalidParams(format!("paths.{key} is required")))
}

/// Inputs a command needs, checked before anything is written.
pub fn precheck(cmd: Command, cfg: &Config) -> std::result::Result<(), String> {
    let p = &cfg.paths;
    let need = |v: &Option<PathBuf>, key: &str| -> std::result::Result<(), String> {
        match v {
            None => Err(format!("{} needs paths.{key}", cmd.name())),
            Some(path) if !path.exists() => Err(format!("paths.{key} {} does not exist", path.display())),
            Some(_) => Ok(()),
        }
    };
    match cmd {
        Command::TrainClassifier | Command::Sample | Command::Infill => need(&p.model, "model")?,
        Command::Control => {
            need(&p.model, "model")?;
            if cfg.control.tasks.is_empty() {
                need(&p.tasks, "tasks")?;
            }
        }
        Command::Eval => need(&p.samples, "samples")?,
        Command::Ablate if matches!(cfg.ablate.study.as_str(), "lambda" | "lr") => {
            need(&p.model, "model")?;
            if p.classifiers.is_empty() {
                return Err("guidance ablations need paths.classifiers".into());
            }
        }
        _ => {}
    }
    if let Some(r) = &p.resume {
        if !r.exists() {
            return Err(format!("paths.resume {} does not exist", r.display()));
        }
    }
    if let Some(c) = &p.corpus {
        for s in Split::ALL {
            if !c.join(format!("{}.txt", s.name())).exists() {
                return Err(format!("paths.corpus {} lacks {}.txt", c.display(), s.name()));
            }
        }
    }
    if let Some(missing) = p.classifiers.iter().find(|c| !c.exists()) {
        return Err(format!("classifier {} does not exist", missing.display()));
    }
    if cmd == Command::Infill && cfg.infill.left.trim().is_empty() && cfg.infill.right.trim().is_empty() {
        return Err("infill needs infill.left or infill.right".into());
    }
    Ok(())
}

/// How a command that returned normally ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Complete,
    /// Stopped early on purpose; the reason goes into the marker.
    Partial(String),
}

pub fn run(cmd: Command, cfg: &Config, out: &Path) -> Result<Outcome> {
    if cmd == Command::Train {
        return train(cfg, out);
    }
    match cmd {
        Command::GenCorpus => gen_corpus(cfg, out),
        Command::Train => unreachable!(),
        Command::TrainClassifier => train_classifier(cfg, out),
        Command::Sample => sample(cfg, out),
        Command::Control => control(cfg, out),
        Command::Infill => infill(cfg, out),
        Command::Eval => eval(cfg, out),
        Command::Gradcheck => gradcheck(cfg, out),
        Command::Ablate => ablate(cfg, out),
    }
    .map(|()| Outcome::Complete)
}

fn gen_corpus(cfg: &Config, out: &Path) -> Result<()> {
    let corpus = ex::corpus(cfg)?;
    let dir = out.join("corpus");
    fs::create_dir_all(&dir)?;
    for s in Split::ALL {
        fs::write(dir.join(format!("{}.txt", s.name())), corpus.split_text(s))?;
    }
    fs::write(dir.join("vocab.txt"), corpus.spec.vocab.to_text())?;
    let h = corpus.spec.entropy_rate(20_000, derive(cfg.seed, "entropy"));
    let mut m = Stream::create(&out.join("metrics.txt"), false)?;
    m.line(&format!(
        "corpus={} vocab={} seq_len={} train={} dev={} test={} entropy_rate={h}",
        corpus.spec.name,
        corpus.spec.vocab_size(),
        corpus.spec.seq_len,
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len()
    ))
}

fn train(cfg: &Config, out: &Path) -> Result<Outcome> {
    let (mut model, spec, mut trainer) = match &cfg.paths.resume {
        Some(path) => {
            let (model, spec, ck) = ex::load_model(path)?;
            let trainer = checkpoint::trainer_from(&ck, &model)?;
            (model, spec, trainer)
        }
        None => {
            let spec = ex::config_spec(cfg)?;
            let model = ex::init_model(cfg, &spec)?;
            let trainer = Trainer::new(ex::train_config(cfg), &model)?;
            (model, spec, trainer)
        }
    };
    let corpus = ex::corpus_for(cfg, spec)?;
    let mut metrics = Stream::create(&out.join("metrics.txt"), cfg.paths.resume.is_some())?;
    let ck_path = out.join("model.ck");
    let stop = cfg.train.stop_at.unwrap_or(usize::MAX);
    while !trainer.done() {
        if trainer.iter >= stop {
            ex::save_model(&ck_path, &model, Some(&trainer), &corpus.spec)?;
            return Ok(Outcome::Partial(format!("stopped at iteration {}", trainer.iter)));
        }
        trainer.step(&mut model, &corpus.train)?;
        if trainer.iter % trainer.config.eval_every == 0 || trainer.done() {
            let r = trainer.evaluate(&model, &corpus.train, &corpus.dev)?;
            metrics.line(&r.to_line())?;
            ex::save_model(&ck_path, &model, Some(&trainer), &corpus.spec)?;
        }
    }
    Ok(Outcome::Complete)
}

fn train_classifier(cfg: &Config, out: &Path) -> Result<()> {
    let (model, spec, _) = ex::load_model(required(&cfg.paths.model, "model")?)?;
    let corpus = ex::corpus_for(cfg, spec)?;
    let mut metrics = Stream::create(&out.join("metrics.txt"), false)?;
    for kind in cfg.classifier_kinds().expect("validated") {
        let (clf, report) = ex::train_classifier(kind, cfg, &model, &corpus)?;
        let mut ck = Checkpoint::default();
        checkpoint::put_classifier(&mut ck, &clf);
        ck.save(&out.join(format!("classifier-{kind}.ck")))?;
        let b = report.band_accuracy;
        metrics.line(&format!(
            "kind={kind} clean_acc={} band1={} band2={} band3={} band4={} final_nll={}",
            report.clean_accuracy, b[0], b[1], b[2], b[3], report.final_nll
        ))?;
    }
    Ok(())
}

fn sample(cfg: &Config, out: &Path) -> Result<()> {
    let (model, spec, _) = ex::load_model(required(&cfg.paths.model, "model")?)?;
    let (seqs, score) = ex::sample_and_score(&model, &spec, cfg.sample.stride, &ex::sample_config(cfg), cfg.sample.count)?;
    let text: String = seqs.iter().map(|w| ex::render(&spec, w) + "\n").collect();
    fs::write(out.join("samples.txt"), text)?;
    Stream::create(&out.join("metrics.txt"), false)?.line(&format!("count={} stride={} lm_score={score}", seqs.len(), cfg.sample.stride))
}

fn load_classifiers(cfg: &Config, spec: &CorpusSpec) -> Result<Vec<LatentClassifier>> {
    cfg.paths.classifiers.iter().map(|p| checkpoint::classifier_from(&Checkpoint::load(p)?, &spec.lexicon)).collect()
}

fn tasks(cfg: &Config) -> Result<Vec<ControlTask>> {
    let mut tasks = match &cfg.paths.tasks {
        Some(p) => parse_tasks(&fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    tasks.extend(cfg.control_tasks().expect("validated"));
    Ok(tasks)
}

fn control(cfg: &Config, out: &Path) -> Result<()> {
    let (model, spec, _) = ex::load_model(required(&cfg.paths.model, "model")?)?;
    let classifiers = load_classifiers(cfg, &spec)?;
    let sched = ex::sampling_schedule(&model, cfg.sample.stride)?;
    let ctl = Controller {
        model: &model.denoiser,
        table: &model.table,
        sched: &sched,
        spec: &spec,
        classifiers: classifiers.iter().collect(),
        sample: ex::sample_config(cfg),
        guidance: cfg.guidance(),
    };
    let mut results = Stream::create(&out.join("results.txt"), false)?;
    let mut samples = Stream::create(&out.join("samples.txt"), false)?;
    for (i, task) in tasks(cfg)?.iter().enumerate() {
        let o = ctl.run(task, cfg.control.k)?;
        let success = control_success(task, &spec, &o.seqs)?;
        let fluency = lm_score(&o.seqs, &Scorer::Oracle(&spec))?;
        let subs: Vec<String> = o.success().iter().map(|s| s.to_string()).collect();
        let mut line = format!("task={i} success={success} sub_success={} lm_score={fluency}", subs.join(","));
        if let Some(a) = o.anchor_accuracy {
            line += &format!(" anchor_acc={a}");
        }
        results.line(&format!("{line} spec={task}"))?;
        for w in &o.seqs {
            samples.line(&format!("{i}\t{}", ex::render(&spec, w)))?;
        }
    }
    Ok(())
}

fn infill(cfg: &Config, out: &Path) -> Result<()> {
    let (model, spec, _) = ex::load_model(required(&cfg.paths.model, "model")?)?;
    let i = &cfg.infill;
    let task = ControlTask::Infill { left: i.left.trim().to_string(), right: i.right.trim().to_string(), middle: i.middle };
    task.validate()?;
    let sched = ex::sampling_schedule(&model, cfg.sample.stride)?;
    let ctl = Controller {
        model: &model.denoiser,
        table: &model.table,
        sched: &sched,
        spec: &spec,
        classifiers: Vec::new(),
        sample: ex::sample_config(cfg),
        guidance: cfg.guidance(),
    };
    let o = ctl.run(&task, cfg.infill.k)?;
    let best = o.selected.expect("infill selects");
    let text: String = o.seqs.iter().map(|w| ex::render(&spec, w) + "\n").collect();
    fs::write(out.join("candidates.txt"), text)?;
    fs::write(out.join("infill.txt"), ex::render(&spec, &o.seqs[best]) + "\n")?;
    Stream::create(&out.join("metrics.txt"), false)?.line(&format!(
        "candidates={} selected={best} anchor_acc={} lm_score={}",
        o.seqs.len(),
        o.anchor_accuracy.unwrap_or(f64::NAN),
        lm_score(std::slice::from_ref(&o.seqs[best]), &Scorer::Oracle(&spec))?
    ))
}

fn eval(cfg: &Config, out: &Path) -> Result<()> {
    let spec = match &cfg.paths.model {
        Some(p) => ex::load_model(p)?.1,
        None => ex::config_spec(cfg)?,
    };
    let text = fs::read_to_string(required(&cfg.paths.samples, "samples")?)?;
    let seqs = text.lines().filter(|l| !l.trim().is_empty()).map(|l| ex::parse_sample(&spec, l)).collect::<Result<Vec<_>>>()?;
    let oracle = lm_score(&seqs, &Scorer::Oracle(&spec))?;
    let mut line = format!("count={} lm_score_oracle={oracle}", seqs.len());
    if cfg.eval.teacher {
        let corpus = ex::corpus_for(cfg, spec.clone())?;
        let tc = ex::teacher_config(cfg);
        let mut teacher = TeacherLm::new(tc, spec.vocab_size(), spec.seq_len, &mut seeded(tc.seed))?;
        let train_nll = train_teacher(&mut teacher, &corpus.train)?;
        let mut ck = Checkpoint::default();
        checkpoint::put_teacher(&mut ck, &teacher);
        ck.save(&out.join("teacher.ck"))?;
        line += &format!(" lm_score_teacher={} teacher_train_nll={train_nll}", lm_score(&seqs, &Scorer::Teacher(&teacher))?);
    }
    Stream::create(&out.join("metrics.txt"), false)?.line(&line)
}

fn gradcheck(cfg: &Config, out: &Path) -> Result<()> {
    let lines = ex::gradcheck_suite(cfg.gradcheck.eps)?;
    let mut report = Stream::create(&out.join("gradcheck.txt"), false)?;
    let mut failed = Vec::new();
    for l in &lines {
        let ok = l.max_rel_error <= cfg.gradcheck.tol;
        report.line(&format!("check={} coords={} max_rel_err={:e} passed={ok}", l.name, l.checked, l.max_rel_error))?;
        if !ok {
            failed.push(l.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(difflm::DiffLmError::InvalidParams(format!("gradient check failed for {}", failed.join(","))))
    }
}

fn ablate(cfg: &Config, out: &Path) -> Result<()> {
    let a = &cfg.ablate;
    let mut table = Stream::create(&out.join("ablation.tsv"), false)?;
    match a.study.as_str() {
        "parametrization" => {
            let corpus = ex::corpus(cfg)?;
            table.line("latent_dim\tparametrization\tlm_score\tfinal_loss")?;
            for &d in &a.dims {
                for p in ["x0", "mu", "eps"] {
                    let mut arm = cfg.clone();
                    arm.model.latent_dim = d;
                    arm.model.parametrization = p.into();
                    arm.train.iterations = a.iterations;
                    let (score, loss) = ex::ablation_arm(&arm, &corpus, a.samples)?;
                    table.line(&format!("{d}\t{p}\t{score}\t{loss}"))?;
                }
            }
        }
        "embeddings" => {
            let corpus = ex::corpus(cfg)?;
            table.line("embeddings\tlm_score\tfinal_loss")?;
            for learned in [true, false] {
                let mut arm = cfg.clone();
                arm.train.train_embeddings = learned;
                arm.train.iterations = a.iterations;
                let (score, loss) = ex::ablation_arm(&arm, &corpus, a.samples)?;
                table.line(&format!("{}\t{score}\t{loss}", if learned { "learned" } else { "random-frozen" }))?;
            }
        }
        study => {
            let (model, spec, _) = ex::load_model(required(&cfg.paths.model, "model")?)?;
            let classifiers = load_classifiers(cfg, &spec)?;
            let sched = ex::sampling_schedule(&model, cfg.sample.stride)?;
            let tasks = tasks(cfg).unwrap_or_default();
            let tasks = if tasks.is_empty() { default_content_tasks(&spec) } else { tasks };
            let grid = if study == "lambda" { &a.lambdas } else { &a.lrs };
            table.line(&format!("{study}\tsuccess\tlm_score"))?;
            for &v in grid {
                let mut guidance = cfg.guidance();
                if study == "lambda" {
                    guidance.lambda = v;
                } else {
                    guidance.lr = v;
                }
                let ctl = Controller {
                    model: &model.denoiser,
                    table: &model.table,
                    sched: &sched,
                    spec: &spec,
                    classifiers: classifiers.iter().collect(),
                    sample: ex::sample_config(cfg),
                    guidance,
                };
                let (mut success, mut all) = (0.0, Vec::new());
                for task in &tasks {
                    let o = ctl.run(task, cfg.control.k)?;
                    success += control_success(task, &spec, &o.seqs)?;
                    all.extend(o.seqs);
                }
                table.line(&format!("{v}\t{}\t{}", success / tasks.len() as f64, lm_score(&all, &Scorer::Oracle(&spec))?))?;
            }
        }
    }
    Ok(())
}

/// One content task per value of the first field.
pub fn default_content_tasks(spec: &CorpusSpec) -> Vec<ControlTask> {
    let field = &spec.lexicon.field_names[0];
    spec.lexicon
        .field_values(0)
        .into_iter()
        .map(|v| ControlTask::SemanticContent { field: field.clone(), value: spec.vocab.token(v).to_string() })
        .collect()
}

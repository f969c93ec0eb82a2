//! Acceptance checks. Prints one PASS/FAIL line per criterion and a
//! summary; with `DIFFLM_ACCEPTANCE_STRICT=1` it also exits non-zero if any
//! criterion fails.
//!
//! `cargo test --release -p difflm-cli --test acceptance -- 1 2 4` runs a
//! subset. Criteria 6-8 reuse the model trained by 5; set
//! `DIFFLM_ACCEPTANCE_MODEL=<path>` to save it there after training, or to
//! load it from there when 5 is not selected.

use std::path::PathBuf;
use std::time::Instant;

use difflm::checkpoint::{self, Checkpoint};
use difflm::control::{ClassifierKind, ControlTask, Controller, GuidanceConfig, LatentClassifier};
use difflm::corpus::{CorpusSpec, OracleCorpus};
use difflm::diffusion::{forward_step_sample, posterior_coeffs};
use difflm::embedding::TokenSeq;
use difflm::eval::{control_success, lm_score, Scorer};
use difflm::model::DiffusionLm;
use difflm::objectives::{nll_bound, rounding_accuracy, terms};
use difflm::rng::{derive, normal, normal_matrix, seeded};
use difflm::schedule::{Schedule, ScheduleKind, ScheduleParams};
use difflm::train::{TrainConfig, Trainer};
use difflm::Tensor;
use difflm_cli::config::Config;
use difflm_cli::experiment as ex;
use rand::Rng;

type Outcome = Result<(bool, String), String>;

const SEED: u64 = 20;
/// Training budget of criterion 5.
const MAIN_ITERATIONS: usize = 16_000;
const MAIN_BUDGET_SECS: f64 = 30.0 * 60.0;

struct Ctx {
    model: Option<(DiffusionLm, OracleCorpus)>,
    classifiers: Option<Vec<LatentClassifier>>,
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |i: usize| wanted.is_empty() || wanted.contains(&i);
    let mut ctx = Ctx { model: None, classifiers: None };
    let (mut ran, mut failed) = (0, 0);
    let criteria: [(usize, fn(&mut Ctx) -> Outcome); 10] = [
        (1, loss_identities),
        (2, gradients),
        (3, forward_process),
        (4, sqrt_schedule),
        (5, main_model),
        (6, unconditional_samples),
        (7, classifier_control),
        (8, length_and_infill),
        (9, ablations),
        (10, reproducibility),
    ];
    for (i, check) in criteria {
        if !run(i) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = check(&mut ctx).unwrap_or_else(|e| (false, format!("error: {e}")));
        let secs = start.elapsed().as_secs_f64();
        println!("criterion {i:>2}: {} {detail} ({secs:.1}s)", if ok { "PASS" } else { "FAIL" });
        ran += 1;
        failed += usize::from(!ok);
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 && std::env::var_os("DIFFLM_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn loss_identities(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let sched = Schedule::sqrt(2000).map_err(err)?;
    let mut rng = seeded(derive(SEED, "identities"));
    let (mut mu_err, mut eps_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        // alpha_bar vanishes at T, where the eps form carries no x0 information.
        let t = rng.gen_range(2..sched.steps());
        let (n, d) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let x0 = normal_matrix(&mut rng, n, d);
        let xt = normal_matrix(&mut rng, n, d);
        let p = normal_matrix(&mut rng, n, d);
        let x0_loss = terms::x0_loss(&x0, &p);
        let c0 = posterior_coeffs(&sched, t).map_err(err)?.c0;
        let mu = terms::mu_loss(&sched, t, &x0, &xt, &p).map_err(err)?;
        mu_err = mu_err.max((mu - c0 * c0 * x0_loss).abs() / (1.0 + mu));
        let ab = sched.alpha_bar(t);
        let eps = terms::eps_loss(&sched, t, &x0, &xt, &p).map_err(err)?;
        eps_err = eps_err.max((x0_loss - (1.0 - ab) / ab * eps).abs() / (1.0 + x0_loss));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = mu_err <= 1e-10 && eps_err <= 1e-10 && secs < 10.0;
    Ok((ok, format!("mu_err={mu_err:.2e} eps_err={eps_err:.2e} draws=1000")))
}

fn gradients(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let lines = ex::gradcheck_suite(1e-5).map_err(err)?;
    let worst = lines.iter().map(|l| l.max_rel_error).fold(0.0, f64::max);
    let name = lines.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).map_or("", |l| l.name.as_str());
    let ok = worst <= 1e-4 && start.elapsed().as_secs_f64() < 120.0;
    Ok((ok, format!("checks={} worst_rel_err={worst:.2e} ({name})", lines.len())))
}

fn forward_process(_: &mut Ctx) -> Outcome {
    let sched = Schedule::sqrt(2000).map_err(err)?;
    let mut rng = seeded(derive(SEED, "forward"));
    let n = 100_000;
    let mut worst = 0.0f64;
    for t in [1, 10, 100, 400] {
        let mut x = Tensor::filled(&[n, 1], 1.5);
        for s in 1..=t {
            x = forward_step_sample(&sched, &x, s, &mut rng).map_err(err)?;
        }
        let mean = x.sum() / n as f64;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let ab = sched.alpha_bar(t);
        worst = worst.max(rel(mean, ab.sqrt() * 1.5)).max(rel(var, 1.0 - ab));
    }
    // Regress x_{t-1} on (x0, x_t) over simulated chains. Later steps have
    // c0 so small that 1e6 draws cannot resolve it to 1%.
    let mut coef = 0.0f64;
    for t in [2, 3, 5] {
        let pc = posterior_coeffs(&sched, t).map_err(err)?;
        let (abp, beta) = (sched.alpha_bar(t - 1), sched.beta(t));
        let m = 1_000_000;
        let (mut s00, mut s02, mut s22, mut s0y, mut s2y) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut rows = Vec::with_capacity(m);
        for _ in 0..m {
            let x0 = normal(&mut rng);
            let x1 = abp.sqrt() * x0 + (1.0 - abp).sqrt() * normal(&mut rng);
            let x2 = (1.0 - beta).sqrt() * x1 + beta.sqrt() * normal(&mut rng);
            s00 += x0 * x0;
            s02 += x0 * x2;
            s22 += x2 * x2;
            s0y += x0 * x1;
            s2y += x2 * x1;
            rows.push((x0, x1, x2));
        }
        let det = s00 * s22 - s02 * s02;
        let c0 = (s22 * s0y - s02 * s2y) / det;
        let ct = (s00 * s2y - s02 * s0y) / det;
        let resid = rows.iter().map(|(a, y, b)| (y - c0 * a - ct * b).powi(2)).sum::<f64>() / m as f64;
        coef = coef.max(rel(c0, pc.c0)).max(rel(ct, pc.ct)).max(rel(resid, pc.var));
    }
    let ok = worst <= 0.02 && coef <= 0.01;
    Ok((ok, format!("marginal_rel_err={worst:.4} posterior_rel_err={coef:.4}")))
}

fn sqrt_schedule(_: &mut Ctx) -> Outcome {
    let big_t = 2000;
    let s = 1e-4;
    let sched = Schedule::build(ScheduleKind::Sqrt, big_t, ScheduleParams { s, ..ScheduleParams::default() }).map_err(err)?;
    let worst = (1..big_t)
        .map(|t| (sched.alpha_bar(t) - (1.0 - (t as f64 / big_t as f64 + s).sqrt())).abs())
        .fold(0.0, f64::max);
    let last = sched.alpha_bar(big_t);
    let std = sched.initial_std();
    let ok = worst <= 1e-12 && last == 0.0 && std == 0.1;
    Ok((ok, format!("max_abs_err={worst:.2e} alpha_bar_T={last} initial_std={std}")))
}

/// The configuration of the main model: restaurants, n=16, d=16,
/// x0-parametrization, sqrt schedule, clamped decoding.
fn main_config() -> Config {
    let mut cfg = Config { seed: SEED, ..Config::default() };
    cfg.train.iterations = MAIN_ITERATIONS;
    cfg.train.eval_every = MAIN_ITERATIONS;
    cfg.train.bound_steps = 0;
    cfg
}

fn model_cache() -> Option<PathBuf> {
    std::env::var_os("DIFFLM_ACCEPTANCE_MODEL").map(PathBuf::from)
}

fn main_model(ctx: &mut Ctx) -> Outcome {
    let cfg = main_config();
    let corpus = ex::corpus(&cfg).map_err(err)?;
    let mut model = ex::init_model(&cfg, &corpus.spec).map_err(err)?;
    let mut trainer = Trainer::new(ex::train_config(&cfg), &model).map_err(err)?;
    let start = Instant::now();
    while !trainer.done() {
        trainer.step(&mut model, &corpus.train).map_err(err)?;
    }
    let secs = start.elapsed().as_secs_f64();
    if let Some(path) = model_cache() {
        ex::save_model(&path, &model, None, &corpus.spec).map_err(err)?;
    }
    let mut rng = seeded(derive(SEED, "bound"));
    let acc = rounding_accuracy(&model, &corpus.train[..1000], &mut rng).map_err(err)?;
    let bound = nll_bound(&model, &corpus.test, 32, 64, &mut rng).map_err(err)?;
    let h = corpus.spec.entropy_rate(20_000, SEED);
    ctx.model = Some((model, corpus));
    let ok = acc >= 0.99 && bound.nats_per_token <= h + 1.0 && secs <= MAIN_BUDGET_SECS;
    Ok((
        ok,
        format!(
            "train_rounding_acc={acc:.4} test_bound={:.3}±{:.3} entropy={h:.3} gap={:.3} train_secs={secs:.0}",
            bound.nats_per_token,
            bound.std_err,
            bound.nats_per_token - h
        ),
    ))
}

fn need_model(ctx: &mut Ctx) -> Result<(), String> {
    if ctx.model.is_some() {
        return Ok(());
    }
    let cfg = main_config();
    match model_cache().filter(|p| p.exists()) {
        Some(path) => {
            let (model, spec, _) = ex::load_model(&path).map_err(err)?;
            let corpus = ex::corpus_for(&cfg, spec).map_err(err)?;
            ctx.model = Some((model, corpus));
            Ok(())
        }
        None => main_model(ctx).map(|_| ()),
    }
}

fn unconditional_samples(ctx: &mut Ctx) -> Outcome {
    need_model(ctx)?;
    let (model, corpus) = ctx.model.as_ref().expect("model");
    let cfg = main_config();
    let sample = ex::sample_config(&cfg);
    let (_, full) = ex::sample_and_score(model, &corpus.spec, 1, &sample, 500).map_err(err)?;
    let (_, fast) = ex::sample_and_score(model, &corpus.spec, 10, &sample, 500).map_err(err)?;
    let h = corpus.spec.entropy_rate(20_000, SEED);
    let ok = (full - h).abs() <= 0.5 && fast - full <= 0.3;
    Ok((ok, format!("lm_score_full={full:.3} lm_score_stride10={fast:.3} entropy={h:.3}")))
}

fn need_classifiers(ctx: &mut Ctx) -> Result<(), String> {
    need_model(ctx)?;
    if ctx.classifiers.is_none() {
        let (model, corpus) = ctx.model.as_ref().expect("model");
        let cfg = main_config();
        let clfs = [ClassifierKind::Content, ClassifierKind::Tags]
            .into_iter()
            .map(|k| ex::train_classifier(k, &cfg, model, corpus).map(|(c, _)| c))
            .collect::<difflm::Result<Vec<_>>>()
            .map_err(err)?;
        ctx.classifiers = Some(clfs);
    }
    Ok(())
}

fn controller<'a>(model: &'a DiffusionLm, sched: &'a Schedule, spec: &'a CorpusSpec, clfs: &'a [LatentClassifier], guidance: GuidanceConfig) -> Controller<'a> {
    Controller {
        model: &model.denoiser,
        table: &model.table,
        sched,
        spec,
        classifiers: clfs.iter().collect(),
        sample: ex::sample_config(&main_config()),
        guidance,
    }
}

/// Mean success per sub-task over `tasks`, and the lm-score of all outputs.
fn evaluate(ctl: &Controller<'_>, tasks: &[ControlTask], k: usize) -> Result<(Vec<f64>, f64), String> {
    let mut sums: Vec<f64> = Vec::new();
    let mut all = Vec::new();
    for task in tasks {
        let o = ctl.run(task, k).map_err(err)?;
        let s = o.success();
        if sums.is_empty() {
            sums = vec![0.0; s.len()];
        }
        for (a, b) in sums.iter_mut().zip(&s) {
            *a += b;
        }
        all.extend(o.seqs);
    }
    let score = lm_score(&all, &Scorer::Oracle(ctl.spec)).map_err(err)?;
    Ok((sums.into_iter().map(|v| v / tasks.len() as f64).collect(), score))
}

fn content_tasks(spec: &CorpusSpec) -> Vec<ControlTask> {
    let field = &spec.lexicon.field_names[0];
    spec.lexicon
        .field_values(0)
        .into_iter()
        .map(|v| ControlTask::SemanticContent { field: field.clone(), value: spec.vocab.token(v).to_string() })
        .collect()
}

/// Tags of the content positions of `w`; later positions are left free.
fn tag_task(spec: &CorpusSpec, w: &TokenSeq) -> ControlTask {
    let ann = spec.annotate(w);
    ControlTask::TokenTags(ann.tags[..ann.length].iter().map(|&t| spec.lexicon.tag_names[t].clone()).collect())
}

fn classifier_control(ctx: &mut Ctx) -> Outcome {
    need_classifiers(ctx)?;
    let (model, corpus) = ctx.model.as_ref().expect("model");
    let clfs = ctx.classifiers.as_deref().expect("classifiers");
    let spec = &corpus.spec;
    let sched = ex::sampling_schedule(model, 10).map_err(err)?;
    let guided = GuidanceConfig::default();
    let plain = GuidanceConfig { inner_steps: 0, ..guided.clone() };
    let k = 20;

    let content = content_tasks(spec);
    let (c_on, _) = evaluate(&controller(model, &sched, spec, clfs, guided.clone()), &content, k)?;
    let (c_off, _) = evaluate(&controller(model, &sched, spec, clfs, plain.clone()), &content, k)?;
    let content_gain = c_on[0] - c_off[0];

    let refs: Vec<&TokenSeq> = corpus.test.iter().take(10).collect();
    let tags: Vec<ControlTask> = refs.iter().map(|w| tag_task(spec, w)).collect();
    let (t_on, _) = evaluate(&controller(model, &sched, spec, clfs, guided.clone()), &tags, k)?;
    let (t_off, _) = evaluate(&controller(model, &sched, spec, clfs, plain.clone()), &tags, k)?;

    // Content and tags taken from the same reference, so both are satisfiable.
    let composite: Vec<ControlTask> = refs
        .iter()
        .filter_map(|w| {
            let ann = spec.annotate(w);
            let &(f, v) = ann.labels.first()?;
            let c = ControlTask::SemanticContent { field: spec.lexicon.field_names[f].clone(), value: spec.vocab.token(v).to_string() };
            Some(ControlTask::Composite(vec![c, tag_task(spec, w)]))
        })
        .collect();
    let (x_on, _) = evaluate(&controller(model, &sched, spec, clfs, guided.clone()), &composite, k)?;
    let (x_off, _) = evaluate(&controller(model, &sched, spec, clfs, plain), &composite, k)?;

    // Fluency weight sweep on a subset of the content tasks.
    let lambdas = [0.0005, 0.001, 0.01, 0.1];
    let sweep_tasks = &content[..content.len().min(5)];
    let mut sweep = Vec::new();
    for &lambda in &lambdas {
        let (s, lm) = evaluate(&controller(model, &sched, spec, clfs, GuidanceConfig { lambda, ..guided.clone() }), sweep_tasks, 10)?;
        sweep.push((s[0], lm));
    }
    let (tol_success, tol_lm) = (0.05, 0.1);
    let monotone = sweep.windows(2).all(|p| p[1].0 <= p[0].0 + tol_success && p[1].1 <= p[0].1 + tol_lm);
    let (first, last) = (sweep[0], sweep[sweep.len() - 1]);
    let tradeoff = monotone && (first.0 > last.0 || first.1 > last.1);

    let ok = content_gain >= 0.30 && t_on[0] > t_off[0] && x_on[0] > x_off[0] && x_on[1] > x_off[1] && tradeoff;
    let sweep_text: Vec<String> = lambdas.iter().zip(&sweep).map(|(l, (s, lm))| format!("{l}:{s:.2}/{lm:.2}")).collect();
    Ok((
        ok,
        format!(
            "content {:.3}->{:.3} tags {:.3}->{:.3} composite content {:.3}->{:.3} tags {:.3}->{:.3} lambda_sweep[success/lm] {}",
            c_off[0],
            c_on[0],
            t_off[0],
            t_on[0],
            x_off[0],
            x_on[0],
            x_off[1],
            x_on[1],
            sweep_text.join(" ")
        ),
    ))
}

fn length_and_infill(ctx: &mut Ctx) -> Outcome {
    need_model(ctx)?;
    let (model, corpus) = ctx.model.as_ref().expect("model");
    let spec = &corpus.spec;
    let sched = ex::sampling_schedule(model, 10).map_err(err)?;
    let ctl = controller(model, &sched, spec, &[], GuidanceConfig::default());

    let mut length_success = 0.0;
    let lengths: Vec<usize> = (5..=13).collect();
    for &len in &lengths {
        let task = ControlTask::Length(len);
        let o = ctl.run(&task, 20).map_err(err)?;
        length_success += control_success(&task, spec, &o.seqs).map_err(err)?;
    }
    length_success /= lengths.len() as f64;

    let fill = ex::unigram_fill(spec);
    let (mut picked, mut baseline) = (Vec::new(), Vec::new());
    let (mut anchor, mut tasks) = (0.0, 0);
    for w in corpus.test.iter().filter(|w| w.content().len() >= 7).take(20) {
        let c = w.content();
        let (left, right) = (&c[..2], &c[c.len() - 2..]);
        let words = |ids: &[usize]| ids.iter().map(|&i| spec.vocab.token(i)).collect::<Vec<_>>().join(" ");
        let task = ControlTask::Infill { left: words(left), right: words(right), middle: None };
        let o = ctl.run(&task, 20).map_err(err)?;
        anchor += o.anchor_accuracy.unwrap_or(0.0);
        tasks += 1;
        picked.push(o.seqs[o.selected.unwrap_or(0)].clone());
        let mut base = left.to_vec();
        base.extend(std::iter::repeat(fill).take(c.len() - 4));
        base.extend_from_slice(right);
        baseline.push(TokenSeq::from_content(&base, spec.seq_len).map_err(err)?);
    }
    let anchor = anchor / tasks as f64;
    let ours = lm_score(&picked, &Scorer::Oracle(spec)).map_err(err)?;
    let base = lm_score(&baseline, &Scorer::Oracle(spec)).map_err(err)?;
    let ok = length_success >= 0.9 && anchor >= 0.999 && base - ours >= 0.5;
    Ok((ok, format!("length_success={length_success:.3} anchor_acc={anchor:.4} infill_lm={ours:.3} unigram_fill_lm={base:.3}")))
}

/// Shared recipe for the ablation arms.
fn ablation_config(preset: &str, latent_dim: usize) -> Config {
    let mut cfg = Config { seed: SEED, ..Config::default() };
    cfg.corpus.preset = preset.into();
    cfg.model.latent_dim = latent_dim;
    cfg.train.iterations = 3000;
    cfg.train.eval_every = 3000;
    cfg
}

fn ablations(_: &mut Ctx) -> Outcome {
    let base = ablation_config("restaurants", 64);
    let corpus = ex::corpus(&base).map_err(err)?;
    let mut scores = Vec::new();
    for p in ["x0", "eps"] {
        let mut arm = base.clone();
        arm.model.parametrization = p.into();
        scores.push(ex::ablation_arm(&arm, &corpus, 200).map_err(err)?.0);
    }
    let hard = ablation_config("restaurants_hard", 16);
    let hard_corpus = ex::corpus(&hard).map_err(err)?;
    for learned in [true, false] {
        let mut arm = hard.clone();
        arm.train.train_embeddings = learned;
        scores.push(ex::ablation_arm(&arm, &hard_corpus, 200).map_err(err)?.0);
    }
    let ok = scores[0] <= scores[1] && scores[2] <= scores[3];
    Ok((
        ok,
        format!("d64 x0={:.3} eps={:.3}; hard learned={:.3} random_frozen={:.3}", scores[0], scores[1], scores[2], scores[3]),
    ))
}

fn small_run() -> Result<(DiffusionLm, OracleCorpus, TrainConfig), String> {
    let mut cfg = Config { seed: SEED, ..Config::default() };
    cfg.corpus.train = 500;
    cfg.corpus.dev = 50;
    cfg.model.width = 32;
    cfg.train.iterations = 200;
    cfg.train.eval_every = 50;
    cfg.train.eval_sequences = 32;
    cfg.train.bound_steps = 4;
    let corpus = ex::corpus(&cfg).map_err(err)?;
    let model = ex::init_model(&cfg, &corpus.spec).map_err(err)?;
    Ok((model, corpus, ex::train_config(&cfg)))
}

fn snapshot(model: &DiffusionLm, trainer: &Trainer) -> Vec<u8> {
    let mut ck = Checkpoint::default();
    checkpoint::put_model(&mut ck, model);
    checkpoint::put_trainer(&mut ck, trainer);
    ck.to_bytes()
}

fn reproducibility(_: &mut Ctx) -> Outcome {
    let metrics = || -> Result<(Vec<String>, Vec<u8>), String> {
        let (mut model, corpus, tc) = small_run()?;
        let mut trainer = Trainer::new(tc, &model).map_err(err)?;
        let records = trainer.run(&mut model, &corpus.train, &corpus.dev, |_, _, _| Ok(())).map_err(err)?;
        Ok((records.iter().map(|r| r.to_line()).collect(), snapshot(&model, &trainer)))
    };
    let (a, a_bytes) = metrics()?;
    let (b, b_bytes) = metrics()?;
    let same_metrics = a == b && a_bytes == b_bytes;

    let (mut model, corpus, tc) = small_run()?;
    let mut trainer = Trainer::new(tc.clone(), &model).map_err(err)?;
    while !trainer.done() {
        trainer.step(&mut model, &corpus.train).map_err(err)?;
    }
    let straight = snapshot(&model, &trainer);
    let (mut model, corpus, tc) = small_run()?;
    let mut trainer = Trainer::new(tc, &model).map_err(err)?;
    while trainer.iter < 100 {
        trainer.step(&mut model, &corpus.train).map_err(err)?;
    }
    let ck = Checkpoint::from_bytes(&snapshot(&model, &trainer)).map_err(err)?;
    let mut model = checkpoint::model_from(&ck).map_err(err)?;
    let mut trainer = checkpoint::trainer_from(&ck, &model).map_err(err)?;
    while !trainer.done() {
        trainer.step(&mut model, &corpus.train).map_err(err)?;
    }
    let resumed = snapshot(&model, &trainer) == straight;
    Ok((
        same_metrics && resumed,
        format!("metric_lines={} identical_metrics={same_metrics} resume_bit_exact={resumed}", a.len()),
    ))
}

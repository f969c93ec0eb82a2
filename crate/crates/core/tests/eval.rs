use difflm::control::ControlTask;
use difflm::corpus::presets::restaurants;
use difflm::corpus::SplitSizes;
use difflm::embedding::{TokenSeq, UNK};
use difflm::eval::{control_success, lm_score, spearman, train_teacher, Scorer, TeacherConfig, TeacherLm};
use difflm::rng::seeded;
use difflm::DiffLmError;
use rand::Rng;

#[test]
fn single_sequence_score_is_nll_per_token() {
    let spec = restaurants(16);
    let w = spec.sample(&mut seeded(2));
    let got = lm_score(std::slice::from_ref(&w), &Scorer::Oracle(&spec)).unwrap();
    let want = spec.exact_nll(&w) / (w.content().len() + 1) as f64;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn corpus_samples_score_near_the_entropy_rate() {
    let spec = restaurants(16);
    let c = spec.generate(9, SplitSizes { train: 0, dev: 0, test: 4000 }).unwrap();
    let got = lm_score(&c.test, &Scorer::Oracle(&spec)).unwrap();
    let h = spec.entropy_rate(4000, 3);
    assert!((got - h).abs() < 0.1, "{got} vs {h}");
}

#[test]
fn uniform_noise_scores_above_the_background_floor() {
    let spec = restaurants(16);
    let (n, v) = (spec.seq_len, spec.vocab_size());
    let mut rng = seeded(4);
    let seqs: Vec<TokenSeq> = (0..300)
        .map(|_| {
            let len = rng.gen_range(0..n);
            let content: Vec<usize> = (0..len).map(|_| rng.gen_range(UNK..v)).collect();
            TokenSeq::from_content(&content, n).unwrap()
        })
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    for w in &seqs {
        let l = w.content().len() as f64;
        num += (n as f64).ln() + l * ((v - 2) as f64).ln();
        den += l + 1.0;
    }
    let floor = num / den;
    let got = lm_score(&seqs, &Scorer::Oracle(&spec)).unwrap();
    assert!(got >= floor, "{got} < {floor}");
}

#[test]
fn control_success_examples() {
    let spec = restaurants(16);
    let food_id = spec.lexicon.field_id("food").unwrap();
    let japanese = spec.vocab.id("japanese");
    let mut rng = seeded(8);
    let w = std::iter::repeat_with(|| spec.sample(&mut rng))
        .find(|w| spec.annotate(w).labels.contains(&(food_id, japanese)) && w.content().len() + 3 < 16)
        .unwrap();

    let len = ControlTask::Length(w.content().len());
    assert_eq!(control_success(&len, &spec, &[w.clone()]).unwrap(), 1.0);
    let off = ControlTask::Length(w.content().len() + 3);
    assert_eq!(control_success(&off, &spec, &[w.clone()]).unwrap(), 0.0);

    let tags: Vec<String> = spec.annotate(&w).tags[..w.content().len()]
        .iter()
        .map(|&t| spec.lexicon.tag_names[t].clone())
        .collect();
    assert_eq!(control_success(&ControlTask::TokenTags(tags), &spec, &[w.clone()]).unwrap(), 1.0);

    let food: ControlTask = "semantic_content field=food value=japanese".parse().unwrap();
    let other: ControlTask = "semantic_content field=food value=italian".parse().unwrap();
    assert_eq!(control_success(&food, &spec, &[w.clone()]).unwrap(), 1.0);
    assert_eq!(control_success(&other, &spec, &[w.clone()]).unwrap(), 0.0);
    assert_eq!(control_success(&food, &spec, &[w.clone(), w.clone()]).unwrap(), 1.0);

    let both = ControlTask::Composite(vec![food, off]);
    assert_eq!(control_success(&both, &spec, &[w]).unwrap(), 0.0);
}

#[test]
fn empty_sets_are_rejected() {
    let spec = restaurants(16);
    assert!(matches!(lm_score(&[], &Scorer::Oracle(&spec)), Err(DiffLmError::EmptySet)));
    assert!(matches!(control_success(&ControlTask::Length(3), &spec, &[]), Err(DiffLmError::EmptySet)));
}

/// `frac` of each set replaced with uniform noise.
fn mixed_set(spec: &difflm::corpus::CorpusSpec, frac: f64, size: usize, rng: &mut impl Rng) -> Vec<TokenSeq> {
    (0..size)
        .map(|_| {
            if rng.gen::<f64>() < frac {
                let len = rng.gen_range(1..spec.seq_len);
                let content: Vec<usize> = (0..len).map(|_| rng.gen_range(UNK..spec.vocab_size())).collect();
                TokenSeq::from_content(&content, spec.seq_len).unwrap()
            } else {
                spec.sample(rng)
            }
        })
        .collect()
}

#[test]
fn teacher_ranks_sets_like_the_oracle() {
    let spec = restaurants(16);
    let c = spec.generate(5, SplitSizes { train: 3000, dev: 0, test: 0 }).unwrap();
    let cfg = TeacherConfig { width: 32, layers: 1, heads: 2, iterations: 400, seed: 1, ..TeacherConfig::default() };
    let mut teacher = TeacherLm::new(cfg, spec.vocab_size(), 16, &mut seeded(6)).unwrap();
    train_teacher(&mut teacher, &c.train).unwrap();
    let mut rng = seeded(7);
    let (mut oracle, mut taught) = (Vec::new(), Vec::new());
    for i in 0..200 {
        let set = mixed_set(&spec, i as f64 / 199.0, 8, &mut rng);
        oracle.push(lm_score(&set, &Scorer::Oracle(&spec)).unwrap());
        taught.push(lm_score(&set, &Scorer::Teacher(&teacher)).unwrap());
    }
    let rho = spearman(&oracle, &taught).unwrap();
    assert!(rho >= 0.8, "rho {rho}");
}

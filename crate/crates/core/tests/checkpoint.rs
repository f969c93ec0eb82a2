use difflm::checkpoint::{
    classifier_from, model_from, put_classifier, put_model, put_teacher, put_trainer, teacher_from, trainer_from, Checkpoint,
};
use difflm::control::{ClassifierConfig, ClassifierKind, LatentClassifier};
use difflm::corpus::presets::restaurants;
use difflm::corpus::SplitSizes;
use difflm::denoiser::{DenoiserConfig, Parametrization};
use difflm::embedding::TokenSeq;
use difflm::eval::{TeacherConfig, TeacherLm};
use difflm::model::DiffusionLm;
use difflm::objectives::Objective;
use difflm::rng::seeded;
use difflm::schedule::Schedule;
use difflm::train::{TrainConfig, Trainer};
use difflm::DiffLmError;

fn setup(objective: Objective) -> (DiffusionLm, TrainConfig, Vec<TokenSeq>) {
    let spec = restaurants(16);
    let c = spec.generate(2, SplitSizes { train: 200, dev: 0, test: 0 }).unwrap();
    let cfg = DenoiserConfig {
        seq_len: 16,
        latent_dim: 8,
        width: 16,
        layers: 1,
        heads: 2,
        max_step: 50,
        parametrization: Parametrization::X0,
        skip: true,
    };
    let model = DiffusionLm::init(cfg, spec.vocab_size(), Schedule::sqrt(50).unwrap(), None, &mut seeded(3)).unwrap();
    let tc = TrainConfig { lr: 1e-3, batch_size: 8, iterations: 20, objective, seed: 7, ..TrainConfig::default() };
    (model, tc, c.train)
}

fn snapshot(model: &DiffusionLm, trainer: &Trainer) -> Checkpoint {
    let mut ck = Checkpoint::default();
    put_model(&mut ck, model);
    put_trainer(&mut ck, trainer);
    ck
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (mut model, tc, train) = setup(Objective::Vlb);
    let mut trainer = Trainer::new(tc, &model).unwrap();
    for _ in 0..5 {
        trainer.step(&mut model, &train).unwrap();
    }
    let a = dir.path().join("a.ck");
    snapshot(&model, &trainer).save(&a).unwrap();
    let ck = Checkpoint::load(&a).unwrap();
    let m2 = model_from(&ck).unwrap();
    let t2 = trainer_from(&ck, &m2).unwrap();
    let b = dir.path().join("b.ck");
    snapshot(&m2, &t2).save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    for objective in [Objective::Simple, Objective::Vlb] {
        let (mut m1, tc, train) = setup(objective);
        let mut m2 = m1.clone();
        let mut t1 = Trainer::new(tc.clone(), &m1).unwrap();
        let straight: Vec<f64> = (0..10).map(|_| t1.step(&mut m1, &train).unwrap().total).collect();

        let mut t2 = Trainer::new(tc, &m2).unwrap();
        let mut resumed: Vec<f64> = (0..4).map(|_| t2.step(&mut m2, &train).unwrap().total).collect();
        let bytes = snapshot(&m2, &t2).to_bytes();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut m3 = model_from(&ck).unwrap();
        let mut t3 = trainer_from(&ck, &m3).unwrap();
        resumed.extend((0..6).map(|_| t3.step(&mut m3, &train).unwrap().total));

        assert_eq!(straight, resumed, "{objective:?}");
        for (a, b) in m1.tensors().iter().zip(m3.tensors()) {
            assert_eq!(*a, b);
        }
        assert_eq!(t1.iter, t3.iter);
    }
}

#[test]
fn damaged_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (model, tc, _) = setup(Objective::Simple);
    let trainer = Trainer::new(tc, &model).unwrap();
    let bytes = snapshot(&model, &trainer).to_bytes();
    let p = dir.path().join("cut.ck");
    std::fs::write(&p, &bytes[..bytes.len() - 100]).unwrap();
    assert!(matches!(Checkpoint::load(&p), Err(DiffLmError::CorruptFile(_))));

    let mut other = bytes.clone();
    other[8..12].copy_from_slice(&2u32.to_le_bytes());
    let n = other.len();
    use sha2::Digest;
    let digest = sha2::Sha256::digest(&other[..n - 32]);
    other[n - 32..].copy_from_slice(&digest);
    assert!(matches!(Checkpoint::from_bytes(&other), Err(DiffLmError::VersionMismatch { found: 2, .. })));
}

#[test]
fn classifier_and_teacher_round_trip() {
    let spec = restaurants(16);
    let dir = tempfile::tempdir().unwrap();
    let cfg = ClassifierConfig { seq_len: 16, latent_dim: 8, width: 16, layers: 1, heads: 2, max_step: 50 };
    for kind in ClassifierKind::ALL {
        let clf = LatentClassifier::new(kind, cfg, &spec.lexicon, &mut seeded(1)).unwrap();
        let mut ck = Checkpoint::default();
        put_classifier(&mut ck, &clf);
        let p = dir.path().join(format!("{kind}.ck"));
        ck.save(&p).unwrap();
        let back = classifier_from(&Checkpoint::load(&p).unwrap(), &spec.lexicon).unwrap();
        assert_eq!(back.kind, kind);
        assert_eq!(back.config, clf.config);
        assert_eq!(back.store.tensors(), clf.store.tensors());
    }
    let t = TeacherLm::new(TeacherConfig { width: 16, layers: 1, heads: 2, ..TeacherConfig::default() }, spec.vocab_size(), 16, &mut seeded(2)).unwrap();
    let mut ck = Checkpoint::default();
    put_teacher(&mut ck, &t);
    let back = teacher_from(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    let w = spec.sample(&mut seeded(3));
    assert_eq!(back.score(&[w.clone()]).unwrap(), t.score(&[w]).unwrap());
}

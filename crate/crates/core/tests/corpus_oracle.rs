use difflm::corpus::presets::{self, micro, restaurants, restaurants_hard};
use difflm::corpus::{OracleCorpus, Split, SplitSizes};
use difflm::embedding::{TokenSeq, END, PAD};
use difflm::rng::seeded;

#[test]
fn micro_distribution_normalizes_by_enumeration() {
    let spec = micro();
    assert_eq!(spec.vocab_size(), 5);
    assert_eq!(spec.seq_len, 4);
    let mut total = 0.0;
    let mut support = 0;
    for code in 0..5usize.pow(4) {
        let ids: Vec<usize> = (0..4).map(|k| (code / 5usize.pow(k)) % 5).collect();
        let Ok(w) = TokenSeq::new(ids, 5) else { continue };
        let nll = spec.exact_nll(&w);
        if nll.is_finite() {
            support += 1;
            total += (-nll).exp();
        }
    }
    // Canonical sequences: content of length 0..=3 over {UNK, a, b}.
    assert_eq!(support, 1 + 3 + 9 + 27);
    assert!((total - 1.0).abs() < 1e-9, "total {total}");
}

#[test]
fn generation_is_deterministic_per_seed() {
    let spec = restaurants(16);
    let sizes = SplitSizes { train: 200, dev: 50, test: 50 };
    let a = spec.generate(5, sizes).unwrap();
    let b = spec.generate(5, sizes).unwrap();
    let c = spec.generate(6, sizes).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.train, c.train);
    assert_ne!(a.train, a.dev[..].to_vec());
}

#[test]
fn unigram_frequencies_match_generator_marginals() {
    let spec = restaurants(16);
    let expect = spec.expected_counts();
    let n = 50_000;
    let mut rng = seeded(9);
    let v = spec.vocab_size();
    let mut sum = vec![0.0; v];
    let mut sq = vec![0.0; v];
    for _ in 0..n {
        let w = spec.sample(&mut rng);
        let mut counts = vec![0.0; v];
        for id in w.content() {
            counts[id] += 1.0;
        }
        for id in 0..v {
            sum[id] += counts[id];
            sq[id] += counts[id] * counts[id];
        }
    }
    for id in 0..v {
        let mean = sum[id] / n as f64;
        let var = (sq[id] / n as f64 - mean * mean).max(1e-12);
        let sigma = (var / n as f64).sqrt().max(1e-6);
        assert!((mean - expect[id]).abs() <= 3.0 * sigma + 1e-9, "{}: {mean} vs {}", spec.vocab.token(id), expect[id]);
    }
}

#[test]
fn annotations_are_functions_of_tokens() {
    let spec = restaurants(16);
    let mut rng = seeded(3);
    for _ in 0..300 {
        let w = spec.sample(&mut rng);
        let a = spec.annotate(&w);
        assert_eq!(a, spec.annotate(&w));
        assert_eq!(a.tags.len(), 16);
        assert_eq!(a.length, w.content().len());
        assert_eq!(a.tags[a.length], spec.lexicon.tag_id("END").unwrap());
        // Re-encoding the rendered record reproduces identical annotations.
        let back = spec.parse_record(&spec.format_record(&w)).unwrap();
        assert_eq!(spec.annotate(&back), a);
        for s in &a.spans {
            assert!(s.start <= s.end && s.end < a.length);
        }
    }
}

#[test]
fn spans_of_a_known_sentence() {
    let spec = restaurants(16);
    let w = spec.vocab.encode("blue spoon is a cheap pub near the museum .", 16).unwrap();
    let a = spec.annotate(&w);
    let rendered: Vec<String> = a.spans.iter().map(|s| format!("{}-{}:{}", s.start, s.end, s.label)).collect();
    assert_eq!(rendered, ["0-1:NP", "2-5:VP", "3-5:NP", "6-8:PP", "7-8:NP"]);
    let food = spec.lexicon.field_id("near").unwrap();
    assert!(a.labels.contains(&(food, spec.vocab.id("museum"))));
}

#[test]
fn split_files_round_trip() {
    let spec = restaurants_hard(16);
    let corpus = spec.generate(1, SplitSizes { train: 30, dev: 10, test: 10 }).unwrap();
    for split in Split::ALL {
        let text = corpus.split_text(split);
        assert!(text.starts_with("# corpus=restaurants_hard"));
        assert_eq!(OracleCorpus::parse_split(&spec, &text).unwrap(), corpus.split(split));
    }
}

#[test]
fn background_covers_every_canonical_text() {
    let spec = restaurants(16);
    let junk = TokenSeq::new(vec![5; 16], spec.vocab_size()).unwrap();
    assert!(spec.score_text(&junk).0.is_finite());
    let empty = TokenSeq::new(vec![PAD; 16], spec.vocab_size()).unwrap();
    let (nll, toks) = spec.score_text(&empty);
    assert!(nll.is_finite());
    assert_eq!(toks, 1);
    let mut ids = vec![PAD; 16];
    ids[0] = END;
    assert_eq!(spec.score_text(&TokenSeq::new(ids, spec.vocab_size()).unwrap()).0, nll);
}

#[test]
fn entropy_rates_are_moderate() {
    for name in ["restaurants", "restaurants_hard"] {
        let spec = presets::by_name(name, 16).unwrap();
        let h = spec.entropy_rate(5_000, 0);
        println!("{name}: entropy {h:.3} nats/token");
        assert!(h > 0.5 && h < 2.0);
    }
}

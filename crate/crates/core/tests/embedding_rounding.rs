use autodiff::Tape;
use difflm::embedding::{EmbeddingTable, TokenSeq};
use difflm::rng::{normal, seeded};
use difflm::Tensor;
use proptest::prelude::*;

#[test]
fn embed_gradient_counts_tokens() {
    let mut rng = seeded(0);
    let table = EmbeddingTable::init(5, 3, 0.1, &mut rng).unwrap();
    let w = TokenSeq::new(vec![3, 3, 4, 1, 0], 5).unwrap();
    let mut tape = Tape::new();
    let e = tape.param(table.weight.clone()).unwrap();
    let x = tape.gather(e, w.ids()).unwrap();
    let total = tape.sum(x).unwrap();
    let g = tape.backward(total).unwrap().get(e);
    let counts = [1.0, 1.0, 0.0, 2.0, 1.0];
    for (id, c) in counts.iter().enumerate() {
        assert!(g.row(id).iter().all(|v| v == c));
    }
}

#[test]
fn init_rows_are_distinct() {
    let mut rng = seeded(1);
    let table = EmbeddingTable::init(200, 16, 0.1, &mut rng).unwrap();
    for i in 0..200 {
        for j in i + 1..200 {
            let d: f64 = table.weight.row(i).iter().zip(table.weight.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(d > 0.0);
        }
    }
}

#[test]
fn sample_x0_moments() {
    let mut rng = seeded(2);
    let table = EmbeddingTable::init(4, 2, 0.1, &mut rng).unwrap();
    let w = TokenSeq::new(vec![3], 4).unwrap();
    let emb = table.embed(&w).unwrap();
    let n = 100_000;
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    for _ in 0..n {
        let x = table.sample_x0(&w, &mut rng).unwrap();
        for k in 0..2 {
            let dev = x.data()[k] - emb.data()[k];
            sum[k] += dev;
            sq[k] += dev * dev;
        }
    }
    for k in 0..2 {
        let mean = sum[k] / n as f64;
        assert!(mean.abs() < 4.0 * 0.1 / (n as f64).sqrt());
        let var = sq[k] / n as f64 - mean * mean;
        assert!((var - 0.01).abs() / 0.01 < 0.05);
    }
}

#[test]
fn zero_sigma_is_exact() {
    let mut rng = seeded(3);
    let mut table = EmbeddingTable::init(4, 3, 0.1, &mut rng).unwrap();
    table.sigma0 = 0.0;
    let w = TokenSeq::new(vec![2, 3, 1], 4).unwrap();
    assert_eq!(table.sample_x0(&w, &mut rng).unwrap(), table.embed(&w).unwrap());
}

#[test]
fn rounding_distribution_normalizes() {
    let mut rng = seeded(4);
    let table = EmbeddingTable::init(3, 2, 0.1, &mut rng).unwrap();
    let x0 = Tensor::matrix(2, 2, vec![0.3, -1.2, 2.0, 0.7]).unwrap();
    let mut total = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            let w = TokenSeq::normalized(vec![a, b]);
            if w.ids() != [a, b] {
                // END followed by a non-PAD id is not a valid sequence; score the raw ids instead.
                total += raw_prob(&table, &x0, &[a, b]);
            } else {
                total += table.rounding_logprob(&x0, &w).unwrap().exp();
            }
        }
    }
    assert!((total - 1.0).abs() < 1e-10);
}

fn raw_prob(table: &EmbeddingTable, x0: &Tensor, ids: &[usize]) -> f64 {
    let logits = table.logits(x0).unwrap();
    ids.iter()
        .enumerate()
        .map(|(i, &id)| {
            let row = logits.row(i);
            row[id].exp() / row.iter().map(|v| v.exp()).sum::<f64>()
        })
        .product()
}

fn brute_nearest(table: &EmbeddingTable, x: &[f64]) -> Vec<f64> {
    let mut best = (f64::INFINITY, 0);
    for id in 0..table.vocab_size() {
        let d: f64 = table.weight.row(id).iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.0 {
            best = (d, id);
        }
    }
    table.weight.row(best.1).to_vec()
}

proptest! {
    #[test]
    fn clamp_is_idempotent_projection(seed in 0u64..10_000) {
        let mut rng = seeded(seed);
        let table = EmbeddingTable::init(50, 16, 0.1, &mut rng).unwrap();
        let x = Tensor::matrix(4, 16, (0..64).map(|_| 0.5 * normal(&mut rng)).collect()).unwrap();
        let c = table.clamp(&x).unwrap();
        prop_assert_eq!(&table.clamp(&c).unwrap(), &c);
        for r in 0..4 {
            prop_assert_eq!(c.row(r).to_vec(), brute_nearest(&table, x.row(r)));
        }
    }

    #[test]
    fn argmax_invariant_to_positive_scaling(seed in 0u64..10_000) {
        let mut rng = seeded(seed);
        let table = EmbeddingTable::init(20, 8, 0.1, &mut rng).unwrap();
        let x = Tensor::matrix(3, 8, (0..24).map(|_| normal(&mut rng)).collect()).unwrap();
        let logits = table.logits(&x).unwrap();
        let margin_ok = (0..3).all(|r| {
            let mut row = logits.row(r).to_vec();
            row.sort_by(|a, b| b.partial_cmp(a).unwrap());
            row[0] - row[1] > 1e-6
        });
        prop_assume!(margin_ok);
        let base = table.argmax_ids(&x).unwrap();
        for lambda in [0.5, 2.0] {
            prop_assert_eq!(&table.argmax_ids(&x.map(|v| lambda * v)).unwrap(), &base);
        }
    }
}

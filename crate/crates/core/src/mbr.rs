//! Minimum-Bayes-risk selection and smoothed sentence BLEU.

use std::collections::HashMap;

use crate::embedding::TokenSeq;
use crate::error::{DiffLmError, Result};

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    for g in tokens.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU over token ids with add-one smoothing of the n-gram
/// precisions for `n >= 2` (unigram precision is left unsmoothed, so
/// disjoint sentences score 0). Orders for which the candidate has no
/// n-grams are skipped. An empty candidate scores 0.
pub fn bleu_tokens(cand: &[usize], reference: &[usize], max_n: usize) -> f64 {
    if cand.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_n.min(cand.len()) {
        let c = ngram_counts(cand, n);
        let r = ngram_counts(reference, n);
        let total = cand.len() + 1 - n;
        let matched: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
        let p = if n == 1 { matched as f64 / total as f64 } else { (matched + 1) as f64 / (total + 1) as f64 };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
        orders += 1;
    }
    let bp = if cand.len() >= reference.len() { 1.0 } else { (1.0 - reference.len() as f64 / cand.len() as f64).exp() };
    bp * (log_sum / orders as f64).exp()
}

/// BLEU of the content tokens (PAD and END stripped).
pub fn bleu(cand: &TokenSeq, reference: &TokenSeq, max_n: usize) -> f64 {
    bleu_tokens(&cand.content(), &reference.content(), max_n)
}

/// `1 - BLEU-4`.
pub fn bleu_loss(a: &TokenSeq, b: &TokenSeq) -> f64 {
    1.0 - bleu(a, b, 4)
}

/// Number of positions with different ids (lengths must agree; extra
/// positions of the longer sequence count as mismatches).
pub fn hamming(a: &TokenSeq, b: &TokenSeq) -> f64 {
    let diff = a.ids().iter().zip(b.ids()).filter(|(x, y)| x != y).count();
    (diff + a.len().abs_diff(b.len())) as f64
}

/// Expected loss of each candidate against the whole set (itself included).
pub fn risks(samples: &[TokenSeq], loss: impl Fn(&TokenSeq, &TokenSeq) -> f64) -> Vec<f64> {
    let k = samples.len() as f64;
    samples.iter().map(|w| samples.iter().map(|v| loss(w, v)).sum::<f64>() / k).collect()
}

/// Index of the minimum-risk sample; the first one on ties.
pub fn mbr_select(samples: &[TokenSeq], loss: impl Fn(&TokenSeq, &TokenSeq) -> f64) -> Result<usize> {
    if samples.is_empty() {
        return Err(DiffLmError::EmptySet);
    }
    let r = risks(samples, loss);
    let mut best = 0;
    for (i, &x) in r.iter().enumerate() {
        if x < r[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_bleu_is_one() {
        let a = [3, 4, 5, 6, 7, 8, 9, 10];
        assert!((bleu_tokens(&a, &a, 4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_applies_to_short_candidates() {
        let r = [3, 4, 5, 6];
        let c = [3, 4];
        let want = (1.0f64 - 2.0).exp() * ((1.0f64).ln() / 2.0 + (2.0f64 / 2.0).ln() / 2.0).exp();
        assert!((bleu_tokens(&c, &r, 4) - want).abs() < 1e-12);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        assert_eq!(bleu_tokens(&[], &[3], 4), 0.0);
    }
}

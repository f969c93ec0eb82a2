//! Vocabulary, token sequences, embedding table, rounding and clamping.

use std::collections::HashMap;

use autodiff::Tensor;
use rand::Rng;

use crate::error::{DiffLmError, Result};
use crate::rng::normal;

pub const PAD: usize = 0;
pub const END: usize = 1;
pub const UNK: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<end>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from content words; reserved ids are prepended.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(DiffLmError::Parse(format!("invalid token {t:?} at line {}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(DiffLmError::Parse(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Parses a newline-delimited vocabulary file (ids by line order).
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        if tokens.len() < 3 || tokens[..3] != RESERVED {
            return Err(DiffLmError::Parse("vocabulary must start with <pad>, <end>, <unk>".into()));
        }
        Self::from_tokens(tokens)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `word`, or UNK.
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn lookup(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Space-joined content words (reserved tokens dropped).
    pub fn detokenize(&self, w: &TokenSeq) -> String {
        w.content().iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// Encodes whitespace-separated words into a canonical length-`n`
    /// sequence (content, END, PAD...).
    pub fn encode(&self, text: &str, n: usize) -> Result<TokenSeq> {
        let ids: Vec<usize> = text.split_whitespace().map(|w| self.id(w)).collect();
        TokenSeq::from_content(&ids, n)
    }
}

/// Fixed-length token ids. At most one END; everything after END is PAD.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    tokens: Vec<usize>,
}

impl TokenSeq {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&id) = tokens.iter().find(|&&id| id >= vocab_size) {
            return Err(DiffLmError::IdOutOfRange { id, vocab: vocab_size });
        }
        if let Some(e) = tokens.iter().position(|&id| id == END) {
            if tokens[e + 1..].iter().any(|&id| id != PAD) {
                return Err(DiffLmError::MalformedSequence("non-PAD token after END".into()));
            }
        }
        Ok(TokenSeq { tokens })
    }

    /// Content ids followed by END and PAD padding to length `n`.
    pub fn from_content(content: &[usize], n: usize) -> Result<Self> {
        if content.len() >= n {
            return Err(DiffLmError::ContextTooLong { context: content.len() + 1, seq_len: n });
        }
        if content.iter().any(|&c| c == PAD || c == END) {
            return Err(DiffLmError::MalformedSequence("reserved id in content".into()));
        }
        let mut tokens = content.to_vec();
        tokens.push(END);
        tokens.resize(n, PAD);
        Ok(TokenSeq { tokens })
    }

    /// Forces everything after the first END to PAD; never fails.
    pub fn normalized(mut tokens: Vec<usize>) -> Self {
        if let Some(e) = tokens.iter().position(|&id| id == END) {
            tokens[e + 1..].iter_mut().for_each(|t| *t = PAD);
        }
        TokenSeq { tokens }
    }

    pub fn ids(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn end_position(&self) -> Option<usize> {
        self.tokens.iter().position(|&id| id == END)
    }

    /// The text: non-PAD ids before END (or the whole sequence if END is absent).
    pub fn content(&self) -> Vec<usize> {
        let stop = self.end_position().unwrap_or(self.tokens.len());
        self.tokens[..stop].iter().copied().filter(|&id| id != PAD).collect()
    }

    /// Canonical form of the text: content, END, PAD. Content longer than
    /// `n - 1` is truncated.
    pub fn canonical(&self) -> TokenSeq {
        let n = self.tokens.len();
        let mut c = self.content();
        c.truncate(n.saturating_sub(1));
        TokenSeq::from_content(&c, n).expect("content fits after truncation")
    }

    pub fn is_canonical(&self) -> bool {
        match self.end_position() {
            Some(e) => self.tokens[..e].iter().all(|&id| id != PAD),
            None => false,
        }
    }
}

/// The trainable map from token ids to latent vectors, with a weight-tied
/// rounding head.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// `V x d`; row `i` is `Emb(i)`.
    pub weight: Tensor,
    pub sigma0: f64,
}

impl EmbeddingTable {
    /// Gaussian rows with std `1/sqrt(d)`.
    pub fn init(vocab: usize, dim: usize, sigma0: f64, rng: &mut impl Rng) -> Result<Self> {
        let std = 1.0 / (dim as f64).sqrt();
        let data = (0..vocab * dim).map(|_| std * normal(rng)).collect();
        Self::from_weight(Tensor::matrix(vocab, dim, data)?, sigma0)
    }

    pub fn from_weight(weight: Tensor, sigma0: f64) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(DiffLmError::ShapeMismatch(format!("embedding must be 2-d, got {:?}", weight.shape())));
        }
        if !(sigma0 >= 0.0) {
            return Err(DiffLmError::InvalidParams(format!("sigma0 = {sigma0}")));
        }
        Ok(EmbeddingTable { weight, sigma0 })
    }

    pub fn vocab_size(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab_size()) {
            return Err(DiffLmError::IdOutOfRange { id, vocab: self.vocab_size() });
        }
        Ok(())
    }

    fn check_rows(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.dim() {
            return Err(DiffLmError::ShapeMismatch(format!("latent {:?} vs dim {}", x.shape(), self.dim())));
        }
        Ok(())
    }

    /// Row-stack of embeddings for `ids` (any number of sequences packed).
    pub fn embed_ids(&self, ids: &[usize]) -> Result<Tensor> {
        self.check_ids(ids)?;
        let d = self.dim();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(self.weight.row(id));
        }
        Ok(Tensor::matrix(ids.len(), d, data)?)
    }

    pub fn embed(&self, w: &TokenSeq) -> Result<Tensor> {
        self.embed_ids(w.ids())
    }

    /// `Emb(w) + sigma0 * eps`.
    pub fn sample_x0(&self, w: &TokenSeq, rng: &mut impl Rng) -> Result<Tensor> {
        let s = self.sigma0;
        Ok(self.embed(w)?.map(|v| v + s * normal(rng)))
    }

    /// Dot-product logits `x E^T`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_rows(x)?;
        Ok(x.matmul(&self.weight.transpose())?)
    }

    /// `sum_i log softmax(x_i E^T)[w_i]`.
    pub fn rounding_logprob(&self, x0: &Tensor, w: &TokenSeq) -> Result<f64> {
        self.check_ids(w.ids())?;
        if x0.rows() != w.len() {
            return Err(DiffLmError::ShapeMismatch(format!("{} rows for {} tokens", x0.rows(), w.len())));
        }
        let logits = self.logits(x0)?;
        let mut total = 0.0;
        for (i, &id) in w.ids().iter().enumerate() {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += row[id] - lse;
        }
        Ok(total)
    }

    /// Id of the Euclidean-nearest row; lowest id on ties.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for id in 0..self.vocab_size() {
            let d: f64 = self.weight.row(id).iter().zip(x).map(|(e, v)| (e - v) * (e - v)).sum();
            if d < best.0 {
                best = (d, id);
            }
        }
        best.1
    }

    pub fn nearest_ids(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.check_rows(x)?;
        Ok((0..x.rows()).map(|r| self.nearest(x.row(r))).collect())
    }

    /// Replaces every row with its nearest embedding row.
    pub fn clamp(&self, xhat: &Tensor) -> Result<Tensor> {
        let ids = self.nearest_ids(xhat)?;
        self.embed_ids(&ids)
    }

    /// Per-row argmax of the rounding distribution; lowest id on ties.
    pub fn argmax_ids(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    pub fn decode_argmax(&self, x0: &Tensor) -> Result<TokenSeq> {
        Ok(TokenSeq::normalized(self.argmax_ids(x0)?))
    }

    /// Decodes packed rows `(batch * seq_len) x d` into sequences.
    pub fn decode_batch(&self, x0: &Tensor, seq_len: usize) -> Result<Vec<TokenSeq>> {
        let ids = self.argmax_ids(x0)?;
        if seq_len == 0 || ids.len() % seq_len != 0 {
            return Err(DiffLmError::ShapeMismatch(format!("{} rows not a multiple of {seq_len}", ids.len())));
        }
        Ok(ids.chunks(seq_len).map(|c| TokenSeq::normalized(c.to_vec())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn table(rows: &[Vec<f64>]) -> EmbeddingTable {
        EmbeddingTable::from_weight(Tensor::from_rows(rows).unwrap(), 0.1).unwrap()
    }

    #[test]
    fn embed_stacks_rows() {
        let t = table(&[vec![0.0], vec![1.0]]);
        let w = TokenSeq::new(vec![1, 0, 0], 2).unwrap();
        assert_eq!(t.embed(&w).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn clamp_nearest_and_tie() {
        let t = table(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let x = Tensor::from_rows(&[vec![0.9, 0.8], vec![0.5, 0.5]]).unwrap();
        assert_eq!(t.clamp(&x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_latent_decodes_to_lowest_id() {
        let mut rng = seeded(1);
        let t = EmbeddingTable::init(6, 4, 0.1, &mut rng).unwrap();
        assert_eq!(t.argmax_ids(&Tensor::zeros(&[3, 4])).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let mut rng = seeded(2);
        let t = EmbeddingTable::init(7, 3, 0.1, &mut rng).unwrap();
        let w = TokenSeq::new(vec![3, 4], 7).unwrap();
        let lp = t.rounding_logprob(&Tensor::zeros(&[2, 3]), &w).unwrap();
        assert!((lp + 2.0 * 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_limit() {
        let t = table(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let w = TokenSeq::new(vec![1], 2).unwrap();
        for beta in [1.0, 5.0, 30.0] {
            let x = Tensor::from_rows(&[vec![0.0, beta]]).unwrap();
            let lp = t.rounding_logprob(&x, &w).unwrap();
            let expect = (beta.exp() / (beta.exp() + 1.0)).ln();
            assert!((lp - expect).abs() < 1e-12);
            assert!(lp < 0.0);
        }
    }

    #[test]
    fn normalization_after_end() {
        let w = TokenSeq::normalized(vec![5, 6, 7, END, 4, 5, END, 3]);
        assert_eq!(w.ids(), &[5, 6, 7, END, PAD, PAD, PAD, PAD]);
    }

    #[test]
    fn invalid_sequences_rejected() {
        assert!(matches!(TokenSeq::new(vec![0, 9], 5), Err(DiffLmError::IdOutOfRange { id: 9, .. })));
        assert!(TokenSeq::new(vec![3, END, 4], 5).is_err());
        assert!(TokenSeq::new(vec![3, END, PAD], 5).is_ok());
    }

    #[test]
    fn canonical_strips_pads_and_appends_end() {
        let w = TokenSeq::new(vec![3, PAD, 4, 5], 6).unwrap();
        assert_eq!(w.content(), vec![3, 4, 5]);
        assert_eq!(w.canonical().ids(), &[3, 4, 5, END]);
        let long = TokenSeq::new(vec![3, 3, 3, 3], 6).unwrap();
        assert_eq!(long.canonical().ids(), &[3, 3, 3, END]);
        assert!(!long.is_canonical());
    }

    #[test]
    fn vocab_round_trip() {
        let v = Vocab::from_words(&["a", "b"]).unwrap();
        let back = Vocab::parse(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.id("zzz"), UNK);
        assert!(Vocab::parse("a\nb\n").is_err());
        assert!(Vocab::from_words(&["a", "a"]).is_err());
        let w = v.encode("a b", 4).unwrap();
        assert_eq!(v.detokenize(&w), "a b");
    }
}

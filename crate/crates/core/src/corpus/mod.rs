//! Synthetic corpora with exact likelihoods and annotations.
//!
//! Sequences come from a mixture: with probability `1 - noise` a
//! probabilistic grammar, otherwise a background model (uniform length in
//! `0..n`, uniform non-reserved tokens). The background gives every
//! canonical sequence positive probability, so likelihoods of arbitrary
//! model output stay finite.

pub mod grammar;
pub mod presets;

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;

use crate::embedding::{TokenSeq, Vocab, END, PAD, UNK};
use crate::error::{DiffLmError, Result};
use crate::rng::{derive, stream};
pub use grammar::{Grammar, Span, SpanLabel};

/// Part-of-speech tag and optional semantic field of every vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub tag_names: Vec<String>,
    pub token_tags: Vec<usize>,
    pub field_names: Vec<String>,
    pub token_fields: Vec<Option<usize>>,
}

impl Lexicon {
    pub fn tag_id(&self, name: &str) -> Option<usize> {
        self.tag_names.iter().position(|t| t == name)
    }

    pub fn field_id(&self, name: &str) -> Option<usize> {
        self.field_names.iter().position(|f| f == name)
    }

    /// Ids whose field is `field`, ascending.
    pub fn field_values(&self, field: usize) -> Vec<usize> {
        (0..self.token_fields.len()).filter(|&id| self.token_fields[id] == Some(field)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub name: String,
    pub vocab: Vocab,
    pub lexicon: Lexicon,
    pub grammar: Grammar,
    pub seq_len: usize,
    /// Mixture weight of the background model.
    pub noise: f64,
}

/// Per-sequence annotations, all computed from the tokens alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    /// One tag per position, including END and PAD positions.
    pub tags: Vec<usize>,
    /// Spans of the most likely derivation; empty off the grammar's support.
    pub spans: Vec<Span>,
    /// `(field, value id)` for every content token carrying a field.
    pub labels: Vec<(usize, usize)>,
    /// Number of content tokens.
    pub length: usize,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let v = self.vocab.len();
        if self.lexicon.token_tags.len() != v || self.lexicon.token_fields.len() != v {
            return Err(DiffLmError::SpecInvalid("lexicon does not cover the vocabulary".into()));
        }
        if v < 4 {
            return Err(DiffLmError::SpecInvalid("vocabulary needs at least one content word".into()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(DiffLmError::SpecInvalid(format!("noise {} not in [0, 1)", self.noise)));
        }
        let (_, max_len) = self.grammar.validate(v, &[PAD, END])?;
        if max_len + 1 > self.seq_len {
            return Err(DiffLmError::SpecInvalid(format!(
                "grammar emits up to {max_len} tokens; sequence length {} leaves no room for END",
                self.seq_len
            )));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn background_prob(&self, len: usize) -> f64 {
        let choices = (self.vocab.len() - 2) as f64;
        (1.0 / self.seq_len as f64) * choices.powi(-(len as i32))
    }

    /// Exact `-log p(w)` for a canonical sequence; infinite otherwise.
    pub fn exact_nll(&self, w: &TokenSeq) -> f64 {
        if w.len() != self.seq_len || !w.is_canonical() || w.ids().iter().any(|&i| i >= self.vocab.len()) {
            return f64::INFINITY;
        }
        let content = w.content();
        let p = self.noise * self.background_prob(content.len()) + (1.0 - self.noise) * self.grammar.prob(&content);
        -p.ln()
    }

    /// NLL and token count (content + END) of the text a sequence spells.
    pub fn score_text(&self, w: &TokenSeq) -> (f64, usize) {
        let c = w.canonical();
        (self.exact_nll(&c), c.content().len() + 1)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TokenSeq {
        let content = if rng.gen::<f64>() < self.noise {
            let len = rng.gen_range(0..self.seq_len);
            (0..len).map(|_| rng.gen_range(UNK..self.vocab.len())).collect()
        } else {
            self.grammar.sample(rng)
        };
        TokenSeq::from_content(&content, self.seq_len).expect("validated length")
    }

    /// Expected occurrences of each id per sequence (content tokens only).
    pub fn expected_counts(&self) -> Vec<f64> {
        let v = self.vocab.len();
        let g = self.grammar.expected_counts(v);
        let mean_len = (self.seq_len - 1) as f64 / 2.0;
        let per_bg = mean_len / (v - 2) as f64;
        (0..v)
            .map(|id| {
                let bg = if id >= UNK { per_bg } else { 0.0 };
                self.noise * bg + (1.0 - self.noise) * g[id]
            })
            .collect()
    }

    /// Annotates the canonical form of `w`; positions refer to that form.
    pub fn annotate(&self, w: &TokenSeq) -> Annotation {
        let c = w.canonical();
        let content = c.content();
        let lex = &self.lexicon;
        let tags = c.ids().iter().map(|&id| lex.token_tags.get(id).copied().unwrap_or(0)).collect();
        let spans = self.grammar.parse_spans(&content).unwrap_or_default();
        let labels = content
            .iter()
            .filter_map(|&id| lex.token_fields.get(id).copied().flatten().map(|f| (f, id)))
            .collect();
        Annotation { tags, spans, labels, length: content.len() }
    }

    pub fn generate(&self, seed: u64, sizes: SplitSizes) -> Result<OracleCorpus> {
        self.validate()?;
        let base = derive(seed, &format!("corpus/{}", self.name));
        let draw = |idx: u64, count: usize| {
            let mut rng = stream(base, idx);
            (0..count).map(|_| self.sample(&mut rng)).collect::<Vec<_>>()
        };
        Ok(OracleCorpus {
            spec: self.clone(),
            train: draw(0, sizes.train),
            dev: draw(1, sizes.dev),
            test: draw(2, sizes.test),
        })
    }

    /// Monte-Carlo entropy rate in nats per token (content + END).
    pub fn entropy_rate(&self, samples: usize, seed: u64) -> f64 {
        let mut rng = stream(derive(seed, "entropy"), 0);
        let (mut nll, mut toks) = (0.0, 0usize);
        for _ in 0..samples {
            let w = self.sample(&mut rng);
            let (n, t) = self.score_text(&w);
            nll += n;
            toks += t;
        }
        nll / toks as f64
    }

    /// Renders one corpus-file record.
    pub fn format_record(&self, w: &TokenSeq) -> String {
        let a = self.annotate(w);
        let c = w.canonical();
        let words: Vec<&str> = c.content().iter().map(|&i| self.vocab.token(i)).collect();
        let tags: Vec<&str> = a.tags[..a.length].iter().map(|&t| self.lexicon.tag_names[t].as_str()).collect();
        let spans: Vec<String> = a.spans.iter().map(|s| format!("{}-{}:{}", s.start, s.end, s.label)).collect();
        let labels: Vec<String> = a
            .labels
            .iter()
            .map(|&(f, v)| format!("{}={}", self.lexicon.field_names[f], self.vocab.token(v)))
            .collect();
        format!(
            "tokens={}\ttags={}\tspans={}\tlabels={}",
            words.join(" "),
            tags.join(" "),
            spans.join(","),
            labels.join(",")
        )
    }

    /// Parses a corpus-file record, checking its annotations against the
    /// tokens.
    pub fn parse_record(&self, line: &str) -> Result<TokenSeq> {
        let tokens = line
            .split('\t')
            .find_map(|f| f.strip_prefix("tokens="))
            .ok_or_else(|| DiffLmError::Parse("record without tokens field".into()))?;
        let ids: Vec<usize> = tokens
            .split_whitespace()
            .map(|t| self.vocab.lookup(t).ok_or_else(|| DiffLmError::Parse(format!("unknown token `{t}`"))))
            .collect::<Result<_>>()?;
        let w = TokenSeq::from_content(&ids, self.seq_len)?;
        if self.format_record(&w) != line {
            return Err(DiffLmError::Parse("annotations disagree with tokens".into()));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCorpus {
    pub spec: CorpusSpec,
    pub train: Vec<TokenSeq>,
    pub dev: Vec<TokenSeq>,
    pub test: Vec<TokenSeq>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = DiffLmError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| DiffLmError::Parse(format!("unknown split `{s}`")))
    }
}

impl OracleCorpus {
    pub fn split(&self, which: Split) -> &[TokenSeq] {
        match which {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Corpus file text for one split: a header line then one record per line.
    pub fn split_text(&self, which: Split) -> String {
        let mut s = format!(
            "# corpus={} seq_len={} noise={} split={}\n",
            self.spec.name,
            self.spec.seq_len,
            self.spec.noise,
            which.name()
        );
        for w in self.split(which) {
            let _ = writeln!(s, "{}", self.spec.format_record(w));
        }
        s
    }

    /// Parses split text written by [`OracleCorpus::split_text`].
    pub fn parse_split(spec: &CorpusSpec, text: &str) -> Result<Vec<TokenSeq>> {
        text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).map(|l| spec.parse_record(l)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn non_canonical_has_infinite_nll() {
        let spec = presets::micro();
        let w = TokenSeq::new(vec![3, PAD, 4, END], 5).unwrap();
        assert!(spec.exact_nll(&w).is_infinite());
        assert!(spec.exact_nll(&w.canonical()).is_finite());
    }

    #[test]
    fn records_round_trip() {
        let spec = presets::restaurants(16);
        let mut rng = seeded(1);
        for _ in 0..50 {
            let w = spec.sample(&mut rng);
            let line = spec.format_record(&w);
            assert_eq!(spec.parse_record(&line).unwrap(), w);
        }
        assert!(spec.parse_record("tokens=zzz\ttags=\tspans=\tlabels=").is_err());
    }

    #[test]
    fn spec_rejects_short_sequences() {
        let mut spec = presets::restaurants(16);
        spec.seq_len = 8;
        assert!(matches!(spec.validate(), Err(DiffLmError::SpecInvalid(_))));
    }
}

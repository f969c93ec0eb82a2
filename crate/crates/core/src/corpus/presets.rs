//! Built-in corpus specifications.

use std::collections::HashMap;

use super::grammar::{Grammar, NodeId, SpanLabel};
use super::{CorpusSpec, Lexicon};
use crate::embedding::Vocab;
use crate::error::{DiffLmError, Result};

pub const DEFAULT_NOISE: f64 = 0.002;

const TAGS: [&str; 12] = ["PAD", "END", "X", "PROPN", "AUX", "DET", "ADJ", "NOUN", "VERB", "ADP", "PUNCT", "CCONJ"];

const NAME_A: [&str; 14] = [
    "blue", "golden", "red", "green", "silver", "little", "old", "royal", "black", "white", "grand", "lucky", "wild",
    "northern",
];
const NAME_B: [&str; 14] = [
    "spoon", "dragon", "lion", "phoenix", "wharf", "mill", "oak", "crown", "anchor", "garden", "lantern", "harbor",
    "castle", "fox",
];
const PRICES: [&str; 4] = ["cheap", "moderate", "expensive", "high-priced"];
const FAMILY: [&str; 2] = ["family-friendly", "adult-only"];
const EATTYPES: [&str; 4] = ["restaurant", "pub", "cafe", "coffee-shop"];
const FOODS: [&str; 10] =
    ["japanese", "italian", "french", "chinese", "indian", "english", "mexican", "thai", "greek", "spanish"];
const LANDMARKS: [&str; 8] = ["museum", "station", "cathedral", "bridge", "market", "library", "park", "theatre"];
const AREAS: [&str; 3] = ["riverside", "city-centre", "suburbs"];
const RATINGS: [&str; 4] = ["low", "average", "high", "5-star"];

/// Collects words with their tag and field, then resolves them to ids.
struct LexBuilder {
    words: Vec<(String, &'static str, Option<&'static str>)>,
    fields: Vec<&'static str>,
}

impl LexBuilder {
    fn new(fields: &[&'static str]) -> Self {
        LexBuilder { words: Vec::new(), fields: fields.to_vec() }
    }

    fn add(&mut self, words: &[&str], tag: &'static str, field: Option<&'static str>) {
        for w in words {
            self.words.push((w.to_string(), tag, field));
        }
    }

    fn build(self) -> Result<(Vocab, Lexicon)> {
        let names: Vec<&str> = self.words.iter().map(|w| w.0.as_str()).collect();
        let vocab = Vocab::from_words(&names)?;
        let tag_names: Vec<String> = TAGS.iter().map(|s| s.to_string()).collect();
        let tag = |t: &str| TAGS.iter().position(|x| *x == t).expect("known tag");
        let mut token_tags = vec![tag("PAD"), tag("END"), tag("X")];
        let mut token_fields = vec![None, None, None];
        for (_, t, f) in &self.words {
            token_tags.push(tag(t));
            token_fields.push(f.map(|f| self.fields.iter().position(|x| *x == f).expect("declared field")));
        }
        let lexicon = Lexicon {
            tag_names,
            token_tags,
            field_names: self.fields.iter().map(|s| s.to_string()).collect(),
            token_fields,
        };
        Ok((vocab, lexicon))
    }
}

/// Grammar construction over word strings.
struct G<'a> {
    g: Grammar,
    ids: &'a HashMap<String, usize>,
}

impl G<'_> {
    fn word(&mut self, w: &str) -> NodeId {
        self.g.emit(vec![(self.ids[w], 1.0)])
    }

    fn uniform(&mut self, words: &[&str]) -> NodeId {
        let p = 1.0 / words.len() as f64;
        self.g.emit(words.iter().map(|w| (self.ids[*w], p)).collect())
    }
}

fn restaurant_lexicon(extra: &[&str]) -> Result<(Vocab, Lexicon)> {
    let mut lb = LexBuilder::new(&["name", "eattype", "food", "price", "rating", "area", "family", "near"]);
    lb.add(&NAME_A, "PROPN", Some("name"));
    lb.add(&NAME_B, "PROPN", Some("name"));
    lb.add(&["is"], "AUX", None);
    lb.add(&["a", "the"], "DET", None);
    lb.add(&PRICES, "ADJ", Some("price"));
    lb.add(&FAMILY, "ADJ", Some("family"));
    lb.add(&EATTYPES, "NOUN", Some("eattype"));
    lb.add(&["serving"], "VERB", None);
    lb.add(&FOODS, "ADJ", Some("food"));
    lb.add(&["food", "rating"], "NOUN", None);
    lb.add(&["near", "in", "with"], "ADP", None);
    lb.add(&LANDMARKS, "NOUN", Some("near"));
    lb.add(&AREAS, "NOUN", Some("area"));
    lb.add(&RATINGS, "ADJ", Some("rating"));
    lb.add(&["."], "PUNCT", None);
    lb.add(extra, "CCONJ", None);
    lb.build()
}

fn id_map(vocab: &Vocab) -> HashMap<String, usize> {
    vocab.tokens().iter().enumerate().map(|(i, t)| (t.clone(), i)).collect()
}

/// Subject: `NAME is a [PRICE] [FAMILY] EATTYPE`, as (name NP, VP).
fn subject(b: &mut G<'_>) -> (NodeId, NodeId) {
    let na = b.uniform(&NAME_A);
    let nb = b.uniform(&NAME_B);
    let name_seq = b.g.seq(vec![na, nb]);
    let name = b.g.span(SpanLabel::Np, name_seq);
    let is = b.word("is");
    let a = b.word("a");
    let price = b.uniform(&PRICES);
    let price = b.g.opt(0.5, price);
    let fam = b.uniform(&FAMILY);
    let fam = b.g.opt(0.3, fam);
    let eat = b.uniform(&EATTYPES);
    let np_seq = b.g.seq(vec![a, price, fam, eat]);
    let np = b.g.span(SpanLabel::Np, np_seq);
    let vp_seq = b.g.seq(vec![is, np]);
    (name, b.g.span(SpanLabel::Vp, vp_seq))
}

/// `serving FOOD food` | `near the LANDMARK` | `in the AREA`.
fn clause(b: &mut G<'_>) -> NodeId {
    let serving = b.word("serving");
    let food_val = b.uniform(&FOODS);
    let food = b.word("food");
    let food_np_seq = b.g.seq(vec![food_val, food]);
    let food_np = b.g.span(SpanLabel::Np, food_np_seq);
    let serve_seq = b.g.seq(vec![serving, food_np]);
    let serve = b.g.span(SpanLabel::Vp, serve_seq);

    let pp = |b: &mut G<'_>, prep: &str, values: &[&str]| {
        let p = b.word(prep);
        let the = b.word("the");
        let v = b.uniform(values);
        let np_seq = b.g.seq(vec![the, v]);
        let np = b.g.span(SpanLabel::Np, np_seq);
        let pp_seq = b.g.seq(vec![p, np]);
        b.g.span(SpanLabel::Pp, pp_seq)
    };
    let near = pp(b, "near", &LANDMARKS);
    let area = pp(b, "in", &AREAS);
    b.g.choice(vec![(0.4, serve), (0.3, near), (0.3, area)])
}

/// `with a RATING rating`.
fn rating(b: &mut G<'_>) -> NodeId {
    let with = b.word("with");
    let a = b.word("a");
    let r = b.uniform(&RATINGS);
    let noun = b.word("rating");
    let np_seq = b.g.seq(vec![a, r, noun]);
    let np = b.g.span(SpanLabel::Np, np_seq);
    let pp_seq = b.g.seq(vec![with, np]);
    b.g.span(SpanLabel::Pp, pp_seq)
}

fn finish(name: &str, vocab: Vocab, lexicon: Lexicon, grammar: Grammar, seq_len: usize) -> CorpusSpec {
    CorpusSpec { name: name.into(), vocab, lexicon, grammar, seq_len, noise: DEFAULT_NOISE }
}

/// Restaurant descriptions over eight fields, at most 15 content tokens.
pub fn restaurants(seq_len: usize) -> CorpusSpec {
    let (vocab, lexicon) = restaurant_lexicon(&[]).expect("static lexicon");
    let ids = id_map(&vocab);
    let mut b = G { g: Grammar::new(), ids: &ids };
    let (name, vp) = subject(&mut b);
    let cl = clause(&mut b);
    let cl = b.g.opt(0.8, cl);
    let rt = rating(&mut b);
    let rt = b.g.opt(0.5, rt);
    let stop = b.word(".");
    let root = b.g.seq(vec![name, vp, cl, rt, stop]);
    b.g.set_root(root);
    finish("restaurants", vocab, lexicon, b.g, seq_len)
}

/// Harder variant: a mandatory clause plus an optional conjoined second
/// clause, so more content is packed into the same length.
pub fn restaurants_hard(seq_len: usize) -> CorpusSpec {
    let (vocab, lexicon) = restaurant_lexicon(&["and"]).expect("static lexicon");
    let ids = id_map(&vocab);
    let mut b = G { g: Grammar::new(), ids: &ids };
    let (name, vp) = subject(&mut b);
    let first = clause(&mut b);
    let and = b.word("and");
    let second = clause(&mut b);
    let tail = b.g.seq(vec![and, second]);
    let tail = b.g.opt(0.5, tail);
    let stop = b.word(".");
    let root = b.g.seq(vec![name, vp, first, tail, stop]);
    b.g.set_root(root);
    finish("restaurants_hard", vocab, lexicon, b.g, seq_len)
}

/// `len` i.i.d. uniform letters.
pub fn letters(len: usize, seq_len: usize) -> CorpusSpec {
    let alphabet: Vec<String> = (b'a'..=b'z').map(|c| (c as char).to_string()).collect();
    let words: Vec<&str> = alphabet.iter().map(String::as_str).collect();
    let mut lb = LexBuilder::new(&[]);
    lb.add(&words, "NOUN", None);
    let (vocab, lexicon) = lb.build().expect("static lexicon");
    let ids = id_map(&vocab);
    let mut b = G { g: Grammar::new(), ids: &ids };
    let slots: Vec<NodeId> = (0..len).map(|_| b.uniform(&words)).collect();
    let root = b.g.seq(slots);
    b.g.set_root(root);
    finish("letters", vocab, lexicon, b.g, seq_len)
}

/// Five-symbol vocabulary, length four: small enough to enumerate.
pub fn micro() -> CorpusSpec {
    let mut lb = LexBuilder::new(&["x"]);
    lb.add(&["a"], "NOUN", Some("x"));
    lb.add(&["b"], "ADJ", None);
    let (vocab, lexicon) = lb.build().expect("static lexicon");
    let ids = id_map(&vocab);
    let mut g = Grammar::new();
    let (a, bb) = (ids["a"], ids["b"]);
    let first = g.emit(vec![(a, 0.6), (bb, 0.4)]);
    let second = g.emit(vec![(a, 0.5), (bb, 0.5)]);
    let second = g.opt(0.5, second);
    let third = g.emit(vec![(bb, 1.0)]);
    let third = g.opt(0.3, third);
    let root = g.seq(vec![first, second, third]);
    g.set_root(root);
    finish("micro", vocab, lexicon, g, 4)
}

pub const PRESETS: [&str; 4] = ["restaurants", "restaurants_hard", "letters", "micro"];

pub fn by_name(name: &str, seq_len: usize) -> Result<CorpusSpec> {
    let spec = match name {
        "restaurants" => restaurants(seq_len),
        "restaurants_hard" => restaurants_hard(seq_len),
        "letters" => letters(seq_len.saturating_sub(1), seq_len),
        "micro" => micro(),
        other => return Err(DiffLmError::SpecInvalid(format!("unknown corpus preset `{other}`"))),
    };
    spec.validate()?;
    Ok(spec)
}

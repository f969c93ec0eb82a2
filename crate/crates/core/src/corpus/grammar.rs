//! Probabilistic regular grammars with exact string probabilities.
//!
//! A grammar is a tree of emit / sequence / choice / optional / span nodes
//! stored in an arena with children before parents. String probability is
//! an inside computation over intervals; the most likely derivation provides
//! span annotations.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{DiffLmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SpanLabel {
    Np,
    Vp,
    Pp,
    None,
}

impl SpanLabel {
    pub const ALL: [SpanLabel; 4] = [SpanLabel::Np, SpanLabel::Vp, SpanLabel::Pp, SpanLabel::None];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SpanLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpanLabel::Np => "NP",
            SpanLabel::Vp => "VP",
            SpanLabel::Pp => "PP",
            SpanLabel::None => "NONE",
        })
    }
}

impl FromStr for SpanLabel {
    type Err = DiffLmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NP" => Ok(SpanLabel::Np),
            "VP" => Ok(SpanLabel::Vp),
            "PP" => Ok(SpanLabel::Pp),
            "NONE" => Ok(SpanLabel::None),
            other => Err(DiffLmError::Parse(format!("unknown span label `{other}`"))),
        }
    }
}

/// Labeled token interval, `end` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: SpanLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Emit(Vec<(usize, f64)>),
    Seq(Vec<NodeId>),
    Choice(Vec<(f64, NodeId)>),
    Opt(f64, NodeId),
    Span(SpanLabel, NodeId),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grammar {
    nodes: Vec<Node>,
    root: Option<NodeId>,
}

/// Square `(len+1) x (len+1)` interval table.
#[derive(Clone)]
struct Table {
    size: usize,
    v: Vec<f64>,
}

impl Table {
    fn zeros(size: usize) -> Self {
        Table { size, v: vec![0.0; size * size] }
    }

    fn identity(size: usize) -> Self {
        let mut t = Self::zeros(size);
        for i in 0..size {
            t.v[i * size + i] = 1.0;
        }
        t
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.size + j]
    }

    fn set(&mut self, i: usize, j: usize, x: f64) {
        self.v[i * self.size + j] = x;
    }

    /// Interval composition: sum-product or max-product.
    fn compose(&self, other: &Table, max: bool) -> Table {
        let n = self.size;
        let mut out = Table::zeros(n);
        for i in 0..n {
            for k in i..n {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in k..n {
                    let p = a * other.at(k, j);
                    let slot = &mut out.v[i * n + j];
                    if max {
                        if p > *slot {
                            *slot = p;
                        }
                    } else {
                        *slot += p;
                    }
                }
            }
        }
        out
    }
}

impl Grammar {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    pub fn emit(&mut self, dist: Vec<(usize, f64)>) -> NodeId {
        self.push(Node::Emit(dist))
    }

    pub fn seq(&mut self, children: Vec<NodeId>) -> NodeId {
        self.push(Node::Seq(children))
    }

    pub fn choice(&mut self, options: Vec<(f64, NodeId)>) -> NodeId {
        self.push(Node::Choice(options))
    }

    pub fn opt(&mut self, p: f64, child: NodeId) -> NodeId {
        self.push(Node::Opt(p, child))
    }

    pub fn span(&mut self, label: SpanLabel, child: NodeId) -> NodeId {
        self.push(Node::Span(label, child))
    }

    pub fn set_root(&mut self, root: NodeId) {
        self.root = Some(root);
    }

    fn root(&self) -> NodeId {
        self.root.expect("grammar root set")
    }

    /// Checks probabilities, ids, child ordering; returns the length range.
    pub fn validate(&self, vocab: usize, reserved: &[usize]) -> Result<(usize, usize)> {
        let bad = |m: String| Err(DiffLmError::SpecInvalid(m));
        let Some(root) = self.root else { return bad("grammar has no root".into()) };
        let mut lens: Vec<(usize, usize)> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let child_ok = |c: &NodeId| c.0 < i;
            let r = match node {
                Node::Emit(dist) => {
                    let total: f64 = dist.iter().map(|d| d.1).sum();
                    if dist.is_empty() || (total - 1.0).abs() > 1e-9 || dist.iter().any(|d| d.1 <= 0.0) {
                        return bad(format!("node {i}: emission probabilities must be positive and sum to 1"));
                    }
                    if let Some(&(id, _)) = dist.iter().find(|d| d.0 >= vocab || reserved.contains(&d.0)) {
                        return bad(format!("node {i}: cannot emit id {id}"));
                    }
                    let mut ids: Vec<usize> = dist.iter().map(|d| d.0).collect();
                    ids.sort_unstable();
                    ids.dedup();
                    if ids.len() != dist.len() {
                        return bad(format!("node {i}: duplicate emission"));
                    }
                    (1, 1)
                }
                Node::Seq(cs) => {
                    if !cs.iter().all(child_ok) {
                        return bad(format!("node {i}: child after parent"));
                    }
                    cs.iter().fold((0, 0), |acc, c| (acc.0 + lens[c.0].0, acc.1 + lens[c.0].1))
                }
                Node::Choice(opts) => {
                    let total: f64 = opts.iter().map(|o| o.0).sum();
                    if opts.is_empty() || (total - 1.0).abs() > 1e-9 || opts.iter().any(|o| o.0 <= 0.0) {
                        return bad(format!("node {i}: choice probabilities must be positive and sum to 1"));
                    }
                    if !opts.iter().all(|o| child_ok(&o.1)) {
                        return bad(format!("node {i}: child after parent"));
                    }
                    (
                        opts.iter().map(|o| lens[o.1 .0].0).min().unwrap_or(0),
                        opts.iter().map(|o| lens[o.1 .0].1).max().unwrap_or(0),
                    )
                }
                Node::Opt(p, c) => {
                    if !(*p > 0.0 && *p < 1.0) || !child_ok(c) {
                        return bad(format!("node {i}: optional probability must be in (0, 1)"));
                    }
                    (0, lens[c.0].1)
                }
                Node::Span(_, c) => {
                    if !child_ok(c) {
                        return bad(format!("node {i}: child after parent"));
                    }
                    lens[c.0]
                }
            };
            lens.push(r);
        }
        Ok(lens[root.0])
    }

    /// Inside tables for every node over `w` (sum- or max-product), plus the
    /// prefix tables of every sequence node.
    fn tables(&self, w: &[usize], max: bool) -> (Vec<Table>, Vec<Vec<Table>>) {
        let size = w.len() + 1;
        let mut tabs: Vec<Table> = Vec::with_capacity(self.nodes.len());
        let mut prefixes: Vec<Vec<Table>> = vec![Vec::new(); self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            let t = match node {
                Node::Emit(dist) => {
                    let mut t = Table::zeros(size);
                    for (i, &tok) in w.iter().enumerate() {
                        if let Some(&(_, p)) = dist.iter().find(|d| d.0 == tok) {
                            t.set(i, i + 1, p);
                        }
                    }
                    t
                }
                Node::Seq(cs) => {
                    let mut acc = Table::identity(size);
                    let mut pref = Vec::with_capacity(cs.len());
                    for c in cs {
                        pref.push(acc.clone());
                        acc = acc.compose(&tabs[c.0], max);
                    }
                    prefixes[idx] = pref;
                    acc
                }
                Node::Choice(opts) => {
                    let mut t = Table::zeros(size);
                    for (p, c) in opts {
                        for (slot, &v) in t.v.iter_mut().zip(&tabs[c.0].v) {
                            let x = p * v;
                            if max {
                                *slot = slot.max(x);
                            } else {
                                *slot += x;
                            }
                        }
                    }
                    t
                }
                Node::Opt(p, c) => {
                    let mut t = Table::zeros(size);
                    for (slot, &v) in t.v.iter_mut().zip(&tabs[c.0].v) {
                        *slot = p * v;
                    }
                    for i in 0..size {
                        let skip = 1.0 - p;
                        let cur = t.at(i, i);
                        t.set(i, i, if max { cur.max(skip) } else { cur + skip });
                    }
                    t
                }
                Node::Span(_, c) => tabs[c.0].clone(),
            };
            tabs.push(t);
        }
        (tabs, prefixes)
    }

    /// Probability that the grammar generates exactly `w` (content ids).
    pub fn prob(&self, w: &[usize]) -> f64 {
        let (tabs, _) = self.tables(w, false);
        tabs[self.root().0].at(0, w.len())
    }

    /// Spans of the most likely derivation of `w`, or `None` when `w` is
    /// outside the grammar's support. Ties resolve to the first alternative.
    pub fn parse_spans(&self, w: &[usize]) -> Option<Vec<Span>> {
        let (tabs, prefixes) = self.tables(w, true);
        let root = self.root();
        if tabs[root.0].at(0, w.len()) <= 0.0 {
            return None;
        }
        let mut spans = Vec::new();
        self.backtrack(root, 0, w.len(), &tabs, &prefixes, &mut spans);
        spans.sort();
        Some(spans)
    }

    fn backtrack(&self, id: NodeId, i: usize, j: usize, tabs: &[Table], pref: &[Vec<Table>], out: &mut Vec<Span>) {
        match &self.nodes[id.0] {
            Node::Emit(_) => {}
            Node::Span(label, c) => {
                if j > i {
                    out.push(Span { start: i, end: j - 1, label: *label });
                }
                self.backtrack(*c, i, j, tabs, pref, out);
            }
            Node::Choice(opts) => {
                let best = opts
                    .iter()
                    .fold((f64::NEG_INFINITY, None), |acc, (p, c)| {
                        let v = p * tabs[c.0].at(i, j);
                        if v > acc.0 {
                            (v, Some(*c))
                        } else {
                            acc
                        }
                    })
                    .1
                    .expect("non-empty choice");
                self.backtrack(best, i, j, tabs, pref, out);
            }
            Node::Opt(p, c) => {
                let take = p * tabs[c.0].at(i, j);
                let skip = if i == j { 1.0 - p } else { 0.0 };
                if take > skip {
                    self.backtrack(*c, i, j, tabs, pref, out);
                }
            }
            Node::Seq(cs) => {
                let prefixes = &pref[id.0];
                let mut end = j;
                for k in (0..cs.len()).rev() {
                    let child = &tabs[cs[k].0];
                    let mut best = (f64::NEG_INFINITY, i);
                    for s in i..=end {
                        let v = prefixes[k].at(i, s) * child.at(s, end);
                        if v > best.0 {
                            best = (v, s);
                        }
                    }
                    self.backtrack(cs[k], best.1, end, tabs, pref, out);
                    end = best.1;
                }
            }
        }
    }

    /// Draws content ids.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::new();
        self.sample_node(self.root(), rng, &mut out);
        out
    }

    fn sample_node(&self, id: NodeId, rng: &mut impl Rng, out: &mut Vec<usize>) {
        match &self.nodes[id.0] {
            Node::Emit(dist) => out.push(pick(dist.iter().map(|d| (d.1, d.0)), rng)),
            Node::Seq(cs) => cs.iter().for_each(|c| self.sample_node(*c, rng, out)),
            Node::Choice(opts) => {
                let c = pick(opts.iter().map(|o| (o.0, o.1)), rng);
                self.sample_node(c, rng, out);
            }
            Node::Opt(p, c) => {
                if rng.gen::<f64>() < *p {
                    self.sample_node(*c, rng, out);
                }
            }
            Node::Span(_, c) => self.sample_node(*c, rng, out),
        }
    }

    /// Expected number of occurrences of each id per generated string.
    pub fn expected_counts(&self, vocab: usize) -> Vec<f64> {
        let mut per: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let mut e = vec![0.0; vocab];
            match node {
                Node::Emit(dist) => dist.iter().for_each(|&(id, p)| e[id] += p),
                Node::Seq(cs) => cs.iter().for_each(|c| add_scaled(&mut e, &per[c.0], 1.0)),
                Node::Choice(opts) => opts.iter().for_each(|(p, c)| add_scaled(&mut e, &per[c.0], *p)),
                Node::Opt(p, c) => add_scaled(&mut e, &per[c.0], *p),
                Node::Span(_, c) => add_scaled(&mut e, &per[c.0], 1.0),
            }
            per.push(e);
        }
        per.swap_remove(self.root().0)
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], k: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += k * s);
}

/// Draws from `(weight, item)` pairs whose weights sum to one.
fn pick<T: Copy>(items: impl Iterator<Item = (f64, T)> + Clone, rng: &mut impl Rng) -> T {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (p, x) in items {
        acc += p;
        last = Some(x);
        if u < acc {
            return x;
        }
    }
    last.expect("non-empty distribution")
}

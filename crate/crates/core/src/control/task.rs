//! Control task records: parsing, formatting and resolution to token ids.

use std::fmt;
use std::str::FromStr;

use crate::corpus::{CorpusSpec, SpanLabel};
use crate::embedding::{TokenSeq, END};
use crate::error::{DiffLmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    SemanticContent,
    TokenTags,
    SpanLabel,
    Length,
    Infill,
    Composite,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SemanticContent => "semantic_content",
            TaskKind::TokenTags => "token_tags",
            TaskKind::SpanLabel => "span_label",
            TaskKind::Length => "length",
            TaskKind::Infill => "infill",
            TaskKind::Composite => "composite",
        }
    }

    /// Whether the task is steered by a latent classifier.
    pub fn needs_classifier(self) -> bool {
        matches!(self, TaskKind::SemanticContent | TaskKind::TokenTags | TaskKind::SpanLabel)
    }
}

/// One control task as written in task files, in surface form (words, tag
/// names, label names).
#[derive(Debug, Clone, PartialEq)]
pub enum ControlTask {
    SemanticContent { field: String, value: String },
    /// Tag names for positions `0..tags.len()`; `*` leaves a position free.
    TokenTags(Vec<String>),
    /// Inclusive token interval `[start, end]`.
    SpanLabel { start: usize, end: usize, label: SpanLabel },
    Length(usize),
    /// `middle` fixes the number of generated tokens between the contexts.
    Infill { left: String, right: String, middle: Option<usize> },
    Composite(Vec<ControlTask>),
}

impl ControlTask {
    pub fn kind(&self) -> TaskKind {
        match self {
            ControlTask::SemanticContent { .. } => TaskKind::SemanticContent,
            ControlTask::TokenTags(_) => TaskKind::TokenTags,
            ControlTask::SpanLabel { .. } => TaskKind::SpanLabel,
            ControlTask::Length(_) => TaskKind::Length,
            ControlTask::Infill { .. } => TaskKind::Infill,
            ControlTask::Composite(_) => TaskKind::Composite,
        }
    }

    /// Sub-tasks of a composite, or the task itself.
    pub fn parts(&self) -> Vec<&ControlTask> {
        match self {
            ControlTask::Composite(parts) => parts.iter().collect(),
            t => vec![t],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ControlTask::TokenTags(tags) if tags.is_empty() => Err(DiffLmError::Parse("token_tags needs at least one tag".into())),
            ControlTask::SpanLabel { start, end, .. } if start > end => {
                Err(DiffLmError::Parse(format!("span start {start} after end {end}")))
            }
            ControlTask::Composite(parts) => {
                if parts.len() < 2 {
                    return Err(DiffLmError::Parse("composite needs at least two sub-tasks".into()));
                }
                if parts.iter().any(|p| p.kind() == TaskKind::Composite) {
                    return Err(DiffLmError::Parse("composite tasks do not nest".into()));
                }
                let anchored = parts.iter().filter(|p| matches!(p.kind(), TaskKind::Length | TaskKind::Infill)).count();
                if anchored > 1 {
                    return Err(DiffLmError::Parse("at most one length or infill sub-task".into()));
                }
                parts.iter().try_for_each(ControlTask::validate)
            }
            _ => Ok(()),
        }
    }

    /// Resolves surface names against a corpus.
    pub fn resolve(&self, spec: &CorpusSpec) -> Result<Vec<Target>> {
        self.validate()?;
        let n = spec.seq_len;
        let lex = &spec.lexicon;
        let word = |w: &str| {
            spec.vocab.lookup(w).ok_or_else(|| DiffLmError::Parse(format!("word `{w}` not in vocabulary")))
        };
        let words = |text: &str| text.split_whitespace().map(word).collect::<Result<Vec<_>>>();
        self.parts()
            .into_iter()
            .map(|t| {
                Ok(match t {
                    ControlTask::SemanticContent { field, value } => {
                        let f = lex.field_id(field).ok_or_else(|| DiffLmError::Parse(format!("unknown field `{field}`")))?;
                        let v = word(value)?;
                        if lex.token_fields[v] != Some(f) {
                            return Err(DiffLmError::KindMismatch(format!("`{value}` is not a value of field `{field}`")));
                        }
                        Target::Content { field: f, value: v }
                    }
                    ControlTask::TokenTags(tags) => {
                        if tags.len() > n {
                            return Err(DiffLmError::LabelShapeMismatch(format!("{} tags for length {n}", tags.len())));
                        }
                        let ids = tags
                            .iter()
                            .map(|t| match t.as_str() {
                                "*" => Ok(None),
                                name => lex.tag_id(name).map(Some).ok_or_else(|| DiffLmError::Parse(format!("unknown tag `{name}`"))),
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Target::Tags(ids)
                    }
                    &ControlTask::SpanLabel { start, end, label } => {
                        if end + 1 >= n {
                            return Err(DiffLmError::LabelShapeMismatch(format!("span [{start}, {end}] leaves no room for END in {n}")));
                        }
                        Target::Span { start, end, label }
                    }
                    &ControlTask::Length(len) => {
                        if len == 0 || len + 1 > n {
                            return Err(DiffLmError::TargetOutOfRange { target: len, max: n - 1 });
                        }
                        Target::Length(len)
                    }
                    ControlTask::Infill { left, right, middle } => {
                        let (l, r) = (words(left)?, words(right)?);
                        if l.len() + r.len() + middle.unwrap_or(0) >= n {
                            return Err(DiffLmError::ContextTooLong { context: l.len() + r.len(), seq_len: n });
                        }
                        Target::Infill { left: l, right: r, middle: *middle }
                    }
                    ControlTask::Composite(_) => unreachable!("validated"),
                })
            })
            .collect()
    }
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

impl fmt::Display for ControlTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlTask::SemanticContent { field, value } => write!(f, "semantic_content field={field} value={value}"),
            ControlTask::TokenTags(tags) => write!(f, "token_tags {}", tags.join(" ")),
            ControlTask::SpanLabel { start, end, label } => write!(f, "span_label start={start} end={end} label={label}"),
            ControlTask::Length(n) => write!(f, "length {n}"),
            ControlTask::Infill { left, right, middle } => {
                write!(f, "infill left={} right={}", quote(left), quote(right))?;
                if let Some(m) = middle {
                    write!(f, " middle={m}")?;
                }
                Ok(())
            }
            ControlTask::Composite(parts) => {
                let inner: Vec<String> = parts.iter().map(|p| p.to_string()).collect();
                write!(f, "composite [{}]", inner.join(" ; "))
            }
        }
    }
}

/// Splits `k=v` pairs; values may be double-quoted with `\"` and `\\` escapes.
fn key_values(s: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut chars = s.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            return Ok(out);
        }
        let key: String = std::iter::from_fn(|| chars.next_if(|&c| c != '=' && !c.is_whitespace())).collect();
        if chars.next() != Some('=') {
            return Err(DiffLmError::Parse(format!("expected key=value, found `{key}`")));
        }
        let mut value = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            loop {
                match chars.next() {
                    Some('\\') => value.push(chars.next().ok_or_else(|| DiffLmError::Parse("dangling escape".into()))?),
                    Some('"') => break,
                    Some(c) => value.push(c),
                    None => return Err(DiffLmError::Parse(format!("unterminated quote for `{key}`"))),
                }
            }
        } else {
            value.extend(std::iter::from_fn(|| chars.next_if(|c| !c.is_whitespace())));
        }
        out.push((key, value));
    }
}

fn take(kv: &mut Vec<(String, String)>, key: &str) -> Option<String> {
    let i = kv.iter().position(|(k, _)| k == key)?;
    Some(kv.remove(i).1)
}

fn need(kv: &mut Vec<(String, String)>, key: &str, kind: &str) -> Result<String> {
    take(kv, key).ok_or_else(|| DiffLmError::Parse(format!("{kind} needs `{key}=`")))
}

fn number<T: FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| DiffLmError::Parse(format!("{what} `{s}` is not a number")))
}

fn no_extra(kv: &[(String, String)], kind: &str) -> Result<()> {
    match kv.first() {
        Some((k, _)) => Err(DiffLmError::Parse(format!("unknown key `{k}` for {kind}"))),
        None => Ok(()),
    }
}

impl FromStr for ControlTask {
    type Err = DiffLmError;

    fn from_str(line: &str) -> Result<Self> {
        let line = line.trim();
        let (head, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        let task = match head {
            "semantic_content" => {
                let mut kv = key_values(rest)?;
                let field = need(&mut kv, "field", head)?;
                let value = need(&mut kv, "value", head)?;
                no_extra(&kv, head)?;
                ControlTask::SemanticContent { field, value }
            }
            "token_tags" => ControlTask::TokenTags(rest.split_whitespace().map(String::from).collect()),
            "span_label" => {
                let mut kv = key_values(rest)?;
                let start = number(&need(&mut kv, "start", head)?, "start")?;
                let end = number(&need(&mut kv, "end", head)?, "end")?;
                let label = need(&mut kv, "label", head)?.parse()?;
                no_extra(&kv, head)?;
                ControlTask::SpanLabel { start, end, label }
            }
            "length" => ControlTask::Length(number(rest, "length")?),
            "infill" => {
                let mut kv = key_values(rest)?;
                let left = need(&mut kv, "left", head)?;
                let right = need(&mut kv, "right", head)?;
                let middle = take(&mut kv, "middle").map(|m| number(&m, "middle")).transpose()?;
                no_extra(&kv, head)?;
                ControlTask::Infill { left, right, middle }
            }
            "composite" => {
                let inner = rest
                    .strip_prefix('[')
                    .and_then(|r| r.strip_suffix(']'))
                    .ok_or_else(|| DiffLmError::Parse("composite expects `[task ; task ...]`".into()))?;
                ControlTask::Composite(inner.split(" ; ").map(str::parse).collect::<Result<_>>()?)
            }
            other => return Err(DiffLmError::Parse(format!("unknown task kind `{other}`"))),
        };
        task.validate()?;
        Ok(task)
    }
}

/// Parses a task file: one task per line, blank lines and `#` comments skipped.
pub fn parse_tasks(text: &str) -> Result<Vec<ControlTask>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::parse)
        .collect()
}

/// A resolved, non-composite task in terms of ids and positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Content { field: usize, value: usize },
    /// Tag id per position, `None` where unconstrained.
    Tags(Vec<Option<usize>>),
    Span { start: usize, end: usize, label: SpanLabel },
    Length(usize),
    Infill { left: Vec<usize>, right: Vec<usize>, middle: Option<usize> },
}

impl Target {
    pub fn kind(&self) -> TaskKind {
        match self {
            Target::Content { .. } => TaskKind::SemanticContent,
            Target::Tags(_) => TaskKind::TokenTags,
            Target::Span { .. } => TaskKind::SpanLabel,
            Target::Length(_) => TaskKind::Length,
            Target::Infill { .. } => TaskKind::Infill,
        }
    }

    /// Per-output success score in `[0, 1]`, judged on the canonical form
    /// of `w` with the corpus annotator. Token tags score the fraction of
    /// constrained positions that match; everything else is 0 or 1.
    pub fn score(&self, spec: &CorpusSpec, w: &TokenSeq) -> f64 {
        let ann = spec.annotate(w);
        let hit = |b: bool| if b { 1.0 } else { 0.0 };
        match self {
            Target::Content { field, value } => hit(ann.labels.contains(&(*field, *value))),
            Target::Tags(tags) => {
                let constrained: Vec<(usize, usize)> =
                    tags.iter().enumerate().filter_map(|(i, t)| t.map(|t| (i, t))).collect();
                if constrained.is_empty() {
                    return 1.0;
                }
                let ok = constrained.iter().filter(|&&(i, t)| ann.tags.get(i) == Some(&t)).count();
                ok as f64 / constrained.len() as f64
            }
            Target::Span { start, end, label } => {
                let found = ann.spans.iter().find(|s| s.start == *start && s.end == *end).map(|s| s.label);
                hit(found.unwrap_or(SpanLabel::None) == *label)
            }
            Target::Length(len) => hit(ann.length.abs_diff(*len) <= 2),
            Target::Infill { left, right, middle } => {
                let c = w.canonical().content();
                let fits = c.len() >= left.len() + right.len()
                    && c.starts_with(left)
                    && c.ends_with(right)
                    && middle.map_or(true, |m| c.len() == left.len() + right.len() + m);
                hit(fits)
            }
        }
    }

    /// Positions and ids pinned by a classifier-free task, for a total
    /// content length chosen by the caller when the task leaves it open.
    pub fn anchors(&self, seq_len: usize, middle: usize) -> Option<Vec<(usize, usize)>> {
        match self {
            Target::Length(len) => Some(end_and_pad(*len, seq_len)),
            Target::Infill { left, right, .. } => {
                let mut a: Vec<(usize, usize)> = left.iter().copied().enumerate().collect();
                let off = left.len() + middle;
                a.extend(right.iter().enumerate().map(|(i, &id)| (off + i, id)));
                a.extend(end_and_pad(off + right.len(), seq_len));
                Some(a)
            }
            _ => None,
        }
    }
}

/// END at `len`, PAD after it.
fn end_and_pad(len: usize, seq_len: usize) -> Vec<(usize, usize)> {
    let mut a = vec![(len, END)];
    a.extend((len + 1..seq_len).map(|p| (p, crate::embedding::PAD)));
    a
}

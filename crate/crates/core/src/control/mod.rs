//! Plug-and-play control of a frozen diffusion LM: classifier guidance for
//! content, tags and spans; anchoring for length and infilling.

pub mod classifier;
pub mod guidance;
pub mod task;

use autodiff::Tensor;

pub use classifier::{
    label_for, train_latent_classifier, ClassifierConfig, ClassifierKind, ClassifierReport, ClassifierTrainConfig, Label,
    LatentClassifier,
};
pub use guidance::{
    guide_latent, guided_generate, guided_reverse_step, objective as guidance_objective, AscentRecord, Chain, ClassifierGuide, Guide, GuidanceConfig,
    GuidanceHook,
};
pub use task::{parse_tasks, ControlTask, TaskKind, Target};

use crate::corpus::CorpusSpec;
use crate::denoiser::Denoise;
use crate::embedding::{EmbeddingTable, TokenSeq, END, PAD};
use crate::error::{DiffLmError, Result};
use crate::mbr::{bleu_loss, mbr_select};
use crate::rng::{normal, DiffRng};
use crate::sampler::{generate_with, SampleConfig, StepHook, StepState};
use crate::schedule::Schedule;

/// Anchors that may differ between samples (infill candidates of different
/// middle lengths). Sample `i` uses `per_sample[i % per_sample.len()]`.
pub struct SampleAnchors<'a> {
    pub per_sample: Vec<Vec<(usize, usize)>>,
    pub table: &'a EmbeddingTable,
    pub seq_len: usize,
}

impl StepHook for SampleAnchors<'_> {
    fn after_step(&mut self, state: &StepState<'_>, x: &mut Tensor, rngs: &mut [DiffRng]) -> Result<()> {
        let ab = state.sched.alpha_bar(state.t - 1);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (b, rng) in rngs.iter_mut().enumerate() {
            let fixed = &self.per_sample[(state.offset + b) % self.per_sample.len()];
            for &(pos, id) in fixed {
                if pos >= self.seq_len {
                    return Err(DiffLmError::ShapeMismatch(format!("anchor position {pos} beyond length {}", self.seq_len)));
                }
                let row = x.row_mut(b * self.seq_len + pos);
                for (v, &e) in row.iter_mut().zip(self.table.weight.row(id)) {
                    *v = sa * e + sn * normal(rng);
                }
            }
        }
        Ok(())
    }
}

/// Everything a control run needs; the model and classifiers are only read.
pub struct Controller<'a> {
    pub model: &'a dyn Denoise,
    pub table: &'a EmbeddingTable,
    /// Sampling grid (already downsampled).
    pub sched: &'a Schedule,
    pub spec: &'a CorpusSpec,
    pub classifiers: Vec<&'a LatentClassifier>,
    pub sample: SampleConfig,
    pub guidance: GuidanceConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    /// All `k` outputs (infill outputs carry the observed context).
    pub seqs: Vec<TokenSeq>,
    /// Success score of every output for every resolved sub-task.
    pub scores: Vec<Vec<f64>>,
    /// Minimum-risk output for infill tasks.
    pub selected: Option<usize>,
    /// Fraction of anchored positions whose latent decodes to the anchored id.
    pub anchor_accuracy: Option<f64>,
}

impl ControlOutput {
    /// Mean success per sub-task.
    pub fn success(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.iter().sum::<f64>() / s.len().max(1) as f64).collect()
    }
}

impl Controller<'_> {
    fn classifier(&self, kind: ClassifierKind) -> Result<&LatentClassifier> {
        self.classifiers
            .iter()
            .copied()
            .find(|c| c.kind == kind)
            .ok_or_else(|| DiffLmError::KindMismatch(format!("no {kind} classifier loaded")))
    }

    fn guide_for(&self, target: &Target) -> Result<Option<ClassifierGuide<'_>>> {
        let (kind, label) = match target {
            &Target::Content { field, value } => (ClassifierKind::Content, Label::Content(vec![(field, Some(value))])),
            Target::Tags(tags) => (ClassifierKind::Tags, Label::Tags(tags.clone())),
            &Target::Span { start, end, label } => (ClassifierKind::Spans, Label::Span { start, end, label }),
            _ => return Ok(None),
        };
        let classifier = self.classifier(kind)?;
        classifier.check_label(&label)?;
        Ok(Some(ClassifierGuide { classifier, label }))
    }

    /// Generates `k` outputs for `task`.
    pub fn run(&self, task: &ControlTask, k: usize) -> Result<ControlOutput> {
        let targets = task.resolve(self.spec)?;
        let n = self.model.seq_len();
        if n != self.spec.seq_len {
            return Err(DiffLmError::ShapeMismatch(format!("model length {n} vs corpus length {}", self.spec.seq_len)));
        }
        let guides: Vec<ClassifierGuide<'_>> = targets.iter().map(|t| self.guide_for(t)).collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
        let guide_refs: Vec<&dyn Guide> = guides.iter().map(|g| g as &dyn Guide).collect();
        let anchored = targets.iter().find(|t| matches!(t.kind(), TaskKind::Length | TaskKind::Infill));
        let middles = match anchored {
            Some(Target::Infill { left, right, middle }) => match middle {
                Some(m) => vec![*m],
                None => (0..n - left.len() - right.len()).collect(),
            },
            _ => vec![0],
        };
        let per_sample: Vec<Vec<(usize, usize)>> = match anchored {
            Some(t) => middles.iter().map(|&m| t.anchors(n, m).expect("anchored target")).collect(),
            None => vec![vec![]],
        };

        let mut guidance = GuidanceHook { guides: guide_refs, cfg: self.guidance, resample: self.sample.resample, seq_len: n, trace: None };
        let mut anchors = SampleAnchors { per_sample: per_sample.clone(), table: self.table, seq_len: n };
        let samples = if guidance.guides.is_empty() {
            generate_with(self.model, self.table, self.sched, &self.sample, k, &mut anchors)?
        } else {
            self.guidance.validate()?;
            let mut chain = Chain(vec![&mut guidance, &mut anchors]);
            generate_with(self.model, self.table, self.sched, &self.sample, k, &mut chain)?
        };

        let anchor_accuracy = anchored.map(|_| {
            let ids = self.table.argmax_ids(&samples.latents).expect("shapes checked");
            let (mut ok, mut total) = (0usize, 0usize);
            for i in 0..k {
                for &(pos, id) in &per_sample[i % per_sample.len()] {
                    total += 1;
                    ok += usize::from(ids[i * n + pos] == id);
                }
            }
            if total == 0 { 1.0 } else { ok as f64 / total as f64 }
        });

        let (seqs, selected) = match anchored {
            Some(Target::Infill { left, right, .. }) => {
                let seqs = samples
                    .seqs
                    .iter()
                    .enumerate()
                    .map(|(i, s)| splice(left, right, middles[i % middles.len()], s, n))
                    .collect::<Result<Vec<_>>>()?;
                let best = if seqs.is_empty() { None } else { Some(mbr_select(&seqs, bleu_loss)?) };
                (seqs, best)
            }
            _ => (samples.seqs, None),
        };
        let scores = targets.iter().map(|t| seqs.iter().map(|s| t.score(self.spec, s)).collect()).collect();
        Ok(ControlOutput { seqs, scores, selected, anchor_accuracy })
    }
}

/// `left ++ generated middle ++ right`; reserved ids generated inside the
/// middle are dropped.
fn splice(left: &[usize], right: &[usize], middle: usize, generated: &TokenSeq, n: usize) -> Result<TokenSeq> {
    let mut content = left.to_vec();
    content.extend(generated.ids()[left.len()..left.len() + middle].iter().copied().filter(|&id| id != PAD && id != END));
    content.extend_from_slice(right);
    TokenSeq::from_content(&content, n)
}

/// Infilling between `left` and `right` (content ids): `k` anchored
/// candidates, then the minimum-BLEU-risk one.
#[allow(clippy::too_many_arguments)]
pub fn anchor_infill(
    model: &dyn Denoise,
    table: &EmbeddingTable,
    sched: &Schedule,
    left: &[usize],
    right: &[usize],
    middle: usize,
    sample: &SampleConfig,
    k: usize,
) -> Result<TokenSeq> {
    let n = model.seq_len();
    if left.len() + right.len() + middle >= n {
        return Err(DiffLmError::ContextTooLong { context: left.len() + right.len(), seq_len: n });
    }
    if k == 0 {
        return Err(DiffLmError::EmptySet);
    }
    let target = Target::Infill { left: left.to_vec(), right: right.to_vec(), middle: Some(middle) };
    let mut hook = SampleAnchors { per_sample: vec![target.anchors(n, middle).expect("infill")], table, seq_len: n };
    let samples = generate_with(model, table, sched, sample, k, &mut hook)?;
    let seqs = samples.seqs.iter().map(|s| splice(left, right, middle, s, n)).collect::<Result<Vec<_>>>()?;
    Ok(seqs[mbr_select(&seqs, bleu_loss)?].clone())
}

/// `k` samples with END anchored at `target_len` and PAD after it.
pub fn length_control(
    model: &dyn Denoise,
    table: &EmbeddingTable,
    sched: &Schedule,
    target_len: usize,
    sample: &SampleConfig,
    k: usize,
) -> Result<Vec<TokenSeq>> {
    let n = model.seq_len();
    if target_len == 0 || target_len + 1 > n {
        return Err(DiffLmError::TargetOutOfRange { target: target_len, max: n - 1 });
    }
    let fixed = Target::Length(target_len).anchors(n, 0).expect("length");
    let mut hook = SampleAnchors { per_sample: vec![fixed], table, seq_len: n };
    Ok(generate_with(model, table, sched, sample, k, &mut hook)?.seqs)
}

//! Parameter storage and the transformer pieces shared by the denoiser,
//! the latent classifiers and the teacher language model.

use autodiff::{Gradients, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{DiffLmError, Result};
use crate::rng::{normal, DiffRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors. Order is fixed at construction and is
/// what optimizers and checkpoints key on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrites values from `(name, tensor)` pairs; every parameter must be
    /// present with its current shape.
    pub fn load<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Tensor>) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = lookup(name).ok_or_else(|| DiffLmError::CorruptFile(format!("missing parameter `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(DiffLmError::ShapeMismatch(format!(
                    "parameter `{name}`: stored {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Places every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect::<autodiff::Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get(v)).collect()
    }
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| std * normal(rng)).collect()).expect("shape")
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    /// Weights `N(0, 1/fan_in) * gain`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), gaussian(rng, fan_in, fan_out, gain / (fan_in as f64).sqrt()));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        Ok(tape.add_bias(y, p.var(self.b))?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[1, width], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[1, width]));
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, p.var(self.gamma), p.var(self.beta))?)
    }
}

/// Inverted dropout with its own random stream.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut DiffRng,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let n = tape.value(x).len();
        let mask = (0..n).map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        Ok(tape.mul_const(x, mask)?)
    }
}

fn maybe_dropout(tape: &mut Tape, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

/// Pre-layer-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, layers: usize, rng: &mut impl Rng) -> Self {
        // Residual branches are scaled down so depth does not blow up the stream.
        let res_gain = 1.0 / (2.0 * layers as f64).sqrt();
        Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, 1.0, rng),
            proj: Linear::new(store, &format!("{name}.proj"), width, width, res_gain, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            fc1: Linear::new(store, &format!("{name}.fc1"), width, 4 * width, 1.0, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * width, width, res_gain, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        seq_len: usize,
        heads: usize,
        causal: bool,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let width = tape.value(x).cols();
        let h = self.ln1.forward(tape, p, x)?;
        let qkv = self.qkv.forward(tape, p, h)?;
        let q = tape.slice_cols(qkv, 0, width)?;
        let k = tape.slice_cols(qkv, width, 2 * width)?;
        let v = tape.slice_cols(qkv, 2 * width, 3 * width)?;
        let a = tape.attention(q, k, v, seq_len, heads, causal)?;
        let a = self.proj.forward(tape, p, a)?;
        let a = maybe_dropout(tape, a, dropout)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, p, h)?;
        let h = maybe_dropout(tape, h, dropout)?;
        Ok(tape.add(x, h)?)
    }
}

/// Sinusoidal features of a step index: `[sin(t w_i), cos(t w_i)]` with
/// geometric frequencies `w_i = 10000^(-i / (width/2))`.
pub fn sinusoidal(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Sinusoidal step features followed by a two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    width: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        TimeEmbedding {
            width,
            l1: Linear::new(store, &format!("{name}.l1"), width, width, 1.0, rng),
            l2: Linear::new(store, &format!("{name}.l2"), width, width, 1.0, rng),
        }
    }

    /// One row per step.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, steps: &[usize]) -> Result<Var> {
        let mut data = Vec::with_capacity(steps.len() * self.width);
        for &t in steps {
            data.extend(sinusoidal(t, self.width));
        }
        let feats = tape.constant(Tensor::matrix(steps.len(), self.width, data)?)?;
        let h = self.l1.forward(tape, p, feats)?;
        let h = tape.gelu(h)?;
        self.l2.forward(tape, p, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrunkConfig {
    pub seq_len: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub causal: bool,
    pub time_conditioned: bool,
}

/// Learned positions (+ optional step conditioning), blocks, final norm.
/// Input and output are packed `(batch * seq_len) x width`.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub config: TrunkConfig,
    pos: ParamId,
    time: Option<TimeEmbedding>,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl Trunk {
    pub fn new(store: &mut ParamStore, name: &str, config: TrunkConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.width == 0 || config.heads == 0 || config.width % config.heads != 0 || config.seq_len == 0 {
            return Err(DiffLmError::InvalidParams(format!(
                "width {} must be a positive multiple of heads {}",
                config.width, config.heads
            )));
        }
        let pos = store.add(format!("{name}.pos"), gaussian(rng, config.seq_len, config.width, 0.02));
        let time = config.time_conditioned.then(|| TimeEmbedding::new(store, &format!("{name}.time"), config.width, rng));
        let blocks = (0..config.layers)
            .map(|i| Block::new(store, &format!("{name}.block{i}"), config.width, config.layers, rng))
            .collect();
        let ln_f = LayerNorm::new(store, &format!("{name}.ln_f"), config.width);
        Ok(Trunk { config, pos, time, blocks, ln_f })
    }

    pub fn position_param(&self) -> ParamId {
        self.pos
    }

    pub fn time_embedding(&self) -> Option<&TimeEmbedding> {
        self.time.as_ref()
    }

    /// `steps` holds one step index per sequence and is required exactly
    /// when the trunk is time-conditioned.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        h0: Var,
        steps: Option<&[usize]>,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<Var> {
        let c = &self.config;
        let rows = tape.value(h0).rows();
        if rows % c.seq_len != 0 || tape.value(h0).cols() != c.width {
            return Err(DiffLmError::ShapeMismatch(format!(
                "trunk input {:?} for seq_len {} width {}",
                tape.value(h0).shape(),
                c.seq_len,
                c.width
            )));
        }
        let batch = rows / c.seq_len;
        let pos_idx: Vec<usize> = (0..rows).map(|r| r % c.seq_len).collect();
        let pos = tape.gather(p.var(self.pos), &pos_idx)?;
        let mut x = tape.add(h0, pos)?;
        match (&self.time, steps) {
            (Some(te), Some(steps)) => {
                if steps.len() != batch {
                    return Err(DiffLmError::ShapeMismatch(format!("{} steps for batch {batch}", steps.len())));
                }
                let temb = te.forward(tape, p, steps)?;
                let seq_idx: Vec<usize> = (0..rows).map(|r| r / c.seq_len).collect();
                let temb = tape.gather(temb, &seq_idx)?;
                x = tape.add(x, temb)?;
            }
            (None, None) => {}
            _ => return Err(DiffLmError::ShapeMismatch("step conditioning mismatch".into())),
        }
        x = maybe_dropout(tape, x, &mut dropout)?;
        for block in &self.blocks {
            x = block.forward(tape, p, x, c.seq_len, c.heads, c.causal, &mut dropout)?;
        }
        self.ln_f.forward(tape, p, x)
    }
}

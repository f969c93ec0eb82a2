//! Append-only tape of tensor ops with eager forward values.
//!
//! Every op computes its value immediately and records enough saved state
//! to apply its vector-Jacobian product later. Nodes are pushed in
//! evaluation order, so the tape is always topologically sorted and a
//! single reverse sweep visits every node once.

use crate::kernels::{gelu, gelu_grad, gemm, logsumexp_rows, softmax_rows};
use crate::{AutodiffError, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied vector-Jacobian product for [`Tape::custom`].
///
/// Receives the upstream gradient and the input values, returns one
/// gradient per input (same shapes as the inputs).
pub type CustomVjp = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    AddBias(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    SquaredError(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        vjp: CustomVjp,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// A tape is single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds an input tensor. Gradients are only tracked for leaves created
    /// with `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise product with a constant mask (dropout, padding masks).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(mismatch("mul_const", format!("{} vs {}", ta.len(), mask.len())));
        }
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul_const", out, Op::MulConst(a, mask), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// Multiplies row `r` by `coeffs[r]`.
    pub fn scale_rows(&mut self, a: Var, coeffs: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if coeffs.len() != ta.rows() {
            return Err(mismatch("scale_rows", format!("{} rows vs {} coeffs", ta.rows(), coeffs.len())));
        }
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        for (row, c) in data.chunks_exact_mut(cols).zip(&coeffs) {
            row.iter_mut().for_each(|v| *v *= c);
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("scale_rows", out, Op::ScaleRows(a, coeffs), &[a])
    }

    /// `x + bias` with `bias` broadcast over rows. The only broadcast the
    /// engine supports.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != tx.cols() {
            return Err(mismatch("add_bias", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let cols = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            row.iter_mut().zip(tb.data()).for_each(|(v, b)| *v += b);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(mismatch("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let out = Tensor::matrix(m, n, out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
            return Err(mismatch("matmul_t", format!("{:?} x {:?}^T", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), true, &mut out, 0.0);
        let out = Tensor::matrix(m, n, out)?;
        self.push("matmul_t", out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(mismatch("transpose", format!("{:?}", ta.shape())));
        }
        let out = ta.transpose();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, cols) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange { op: "gather", index: i, bound: rows });
            }
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor::matrix(indices.len(), cols, data)?;
        self.push("gather", out, Op::Gather(table, indices.to_vec()), &[table])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if start > end || end > ta.cols() {
            return Err(mismatch("slice_cols", format!("{start}..{end} of {:?}", ta.shape())));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(ta.rows() * width);
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row(r)[start..end]);
        }
        let out = Tensor::matrix(ta.rows(), width, data)?;
        self.push("slice_cols", out, Op::SliceCols(a, start), &[a])
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if start > end || end > ta.rows() {
            return Err(mismatch("slice_rows", format!("{start}..{end} of {:?}", ta.shape())));
        }
        let cols = ta.cols();
        let data = ta.data()[start * cols..end * cols].to_vec();
        let out = Tensor::matrix(end - start, cols, data)?;
        self.push("slice_rows", out, Op::SliceRows(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(mismatch("concat_cols", "row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(mismatch("concat_rows", "column counts differ".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::matrix(rows, cols, data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let mut out = vec![0.0; ta.len()];
        softmax_rows(ta.data(), ta.cols(), &mut out);
        let out = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let cols = ta.cols();
        let lse = logsumexp_rows(ta.data(), cols);
        let mut data = ta.data().to_vec();
        for (row, l) in data.chunks_exact_mut(cols).zip(&lse) {
            row.iter_mut().for_each(|v| *v -= l);
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = tx.cols();
        if tg.len() != cols || tb.len() != cols {
            return Err(mismatch("layer_norm", format!("{:?} with gain {:?}", tx.shape(), tg.shape())));
        }
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = Vec::with_capacity(tx.rows());
        let mut out = vec![0.0; tx.len()];
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::scalar(ta.sum() / ta.len() as f64);
        self.push("mean", out, Op::Mean(a), &[a])
    }

    /// `sum((a - b)^2)` as a scalar.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("squared_error", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let total = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push("squared_error", Tensor::scalar(total), Op::SquaredError(a, b), &[a, b])
    }

    /// Summed negative log-likelihood of `targets[r]` under row-wise
    /// softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let cols = tl.cols();
        if targets.len() != tl.rows() {
            return Err(mismatch("cross_entropy", format!("{} rows vs {} targets", tl.rows(), targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(AutodiffError::IndexOutOfRange { op: "cross_entropy", index: bad, bound: cols });
        }
        let mut probs = vec![0.0; tl.len()];
        softmax_rows(tl.data(), cols, &mut probs);
        let lse = logsumexp_rows(tl.data(), cols);
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| lse[r] - tl.data()[r * cols + t])
            .sum();
        self.push(
            "cross_entropy",
            Tensor::scalar(total),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `(batch * seq_len) x width`; each block of
    /// `seq_len` rows is one sequence and attends only within itself. With
    /// `causal`, position `i` sees positions `<= i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize, causal: bool) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.shape().len() != 2 {
            return Err(mismatch("attention", format!("{:?} {:?} {:?}", tq.shape(), tk.shape(), tv.shape())));
        }
        let (rows, width) = (tq.rows(), tq.cols());
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || width % heads != 0 {
            return Err(mismatch(
                "attention",
                format!("rows {rows}, width {width}, seq_len {seq_len}, heads {heads}"),
            ));
        }
        let batch = rows / seq_len;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * width];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut scores = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let qi = &qd[(b * seq_len + i) * width + off..][..dh];
                    let limit = if causal { i + 1 } else { seq_len };
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate().take(limit) {
                        let kj = &kd[(b * seq_len + j) * width + off..][..dh];
                        *s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                        max = max.max(*s);
                    }
                    let p = &mut probs[((b * heads + h) * seq_len + i) * seq_len..][..seq_len];
                    let mut total = 0.0;
                    for j in 0..limit {
                        p[j] = (scores[j] - max).exp();
                        total += p[j];
                    }
                    let o = &mut out[(b * seq_len + i) * width + off..][..dh];
                    for j in 0..limit {
                        p[j] /= total;
                        let vj = &vd[(b * seq_len + j) * width + off..][..dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += p[j] * vc;
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(rows, width, out)?;
        self.push(
            "attention",
            out,
            Op::Attention { q, k, v, seq_len, heads, probs },
            &[q, k, v],
        )
    }

    /// Records an op with caller-provided value and VJP.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, vjp: CustomVjp) -> Result<Var> {
        self.push("custom", value, Op::Custom { inputs: inputs.to_vec(), vjp }, inputs)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(AutodiffError::NonScalarRoot { shape: rv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.apply_vjp(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn apply_vjp(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Accumulates into a parent's gradient buffer, allocating zeros on first use.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if wants(p) {
                        slot(grads, nodes, p).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if wants(*b) {
                    slot(grads, nodes, *b).iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b).data();
                    let d = slot(grads, nodes, *a);
                    for i in 0..g.len() {
                        d[i] += g[i] * other[i];
                    }
                }
                if wants(*b) {
                    let other = val(*a).data();
                    let d = slot(grads, nodes, *b);
                    for i in 0..g.len() {
                        d[i] += g[i] * other[i];
                    }
                }
            }
            Op::MulConst(a, mask) => {
                let d = slot(grads, nodes, *a);
                for i in 0..g.len() {
                    d[i] += g[i] * mask[i];
                }
            }
            Op::Scale(a, c) => {
                slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
            }
            Op::ScaleRows(a, coeffs) => {
                let cols = val(*a).cols();
                let d = slot(grads, nodes, *a);
                for (r, c) in coeffs.iter().enumerate() {
                    for j in 0..cols {
                        d[r * cols + j] += c * g[r * cols + j];
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    slot(grads, nodes, *x).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if wants(*bias) {
                    let cols = val(*bias).len();
                    let d = slot(grads, nodes, *bias);
                    for row in g.chunks_exact(cols) {
                        d.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    // dA = G B^T
                    gemm(m, n, k, g, false, tb.data(), true, slot(grads, nodes, *a), 1.0);
                }
                if wants(*b) {
                    // dB = A^T G
                    gemm(k, m, n, ta.data(), true, g, false, slot(grads, nodes, *b), 1.0);
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if wants(*a) {
                    // dA = G B
                    gemm(m, n, k, g, false, tb.data(), false, slot(grads, nodes, *a), 1.0);
                }
                if wants(*b) {
                    // dB = G^T A
                    gemm(n, m, k, g, true, ta.data(), false, slot(grads, nodes, *b), 1.0);
                }
            }
            Op::Transpose(a) => {
                let ta = val(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let d = slot(grads, nodes, *a);
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(a) => {
                slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            Op::Gather(table, indices) => {
                let cols = val(*table).cols();
                let d = slot(grads, nodes, *table);
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..cols {
                        d[i * cols + j] += g[r * cols + j];
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let cols = val(*a).cols();
                let width = node.value.cols();
                let d = slot(grads, nodes, *a);
                for r in 0..node.value.rows() {
                    for j in 0..width {
                        d[r * cols + start + j] += g[r * width + j];
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let cols = val(*a).cols();
                let d = slot(grads, nodes, *a);
                let off = start * cols;
                for (i, s) in g.iter().enumerate() {
                    d[off + i] += s;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let width = val(p).cols();
                    if wants(p) {
                        let d = slot(grads, nodes, p);
                        for r in 0..node.value.rows() {
                            for j in 0..width {
                                d[r * width + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += width;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if wants(p) {
                        slot(grads, nodes, p).iter_mut().zip(&g[off..off + len]).for_each(|(d, s)| *d += s);
                    }
                    off += len;
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let d = slot(grads, nodes, *a);
                for r in 0..node.value.rows() {
                    let (yr, gr) = (&y[r * cols..][..cols], &g[r * cols..][..cols]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        d[r * cols + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let d = slot(grads, nodes, *a);
                for r in 0..node.value.rows() {
                    let gr = &g[r * cols..][..cols];
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        d[r * cols + j] += gr[j] - y[r * cols + j].exp() * total;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                if wants(*gamma) {
                    let d = slot(grads, nodes, *gamma);
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if wants(*beta) {
                    let d = slot(grads, nodes, *beta);
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c] += g[r * cols + c];
                        }
                    }
                }
                if wants(*x) {
                    let gam = val(*gamma).data().to_vec();
                    let d = slot(grads, nodes, *x);
                    let inv = 1.0 / cols as f64;
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = g[r * cols + c] * gam[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * cols + c];
                        }
                        mean_dh *= inv;
                        mean_dh_h *= inv;
                        for c in 0..cols {
                            let dh = g[r * cols + c] * gam[c];
                            d[r * cols + c] += rstd[r] * (dh - mean_dh - xhat[r * cols + c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                let d = slot(grads, nodes, *a);
                for i in 0..g.len() {
                    d[i] += g[i] * gelu_grad(x[i]);
                }
            }
            Op::Sum(a) => {
                let s = g[0];
                slot(grads, nodes, *a).iter_mut().for_each(|d| *d += s);
            }
            Op::Mean(a) => {
                let s = g[0] / val(*a).len() as f64;
                slot(grads, nodes, *a).iter_mut().for_each(|d| *d += s);
            }
            Op::SquaredError(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let s = 2.0 * g[0];
                if wants(*a) {
                    let d = slot(grads, nodes, *a);
                    for i in 0..ta.len() {
                        d[i] += s * (ta[i] - tb[i]);
                    }
                }
                if wants(*b) {
                    let d = slot(grads, nodes, *b);
                    for i in 0..ta.len() {
                        d[i] -= s * (ta[i] - tb[i]);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let cols = val(*logits).cols();
                let s = g[0];
                let d = slot(grads, nodes, *logits);
                for (i, p) in probs.iter().enumerate() {
                    d[i] += s * p;
                }
                for (r, &t) in targets.iter().enumerate() {
                    d[r * cols + t] -= s;
                }
            }
            Op::Attention { q, k, v, seq_len, heads, probs } => {
                self.attention_vjp(*q, *k, *v, *seq_len, *heads, probs, g, grads);
            }
            Op::Custom { inputs, vjp } => {
                let upstream = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let vals: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
                let parts = vjp(&upstream, &vals);
                if parts.len() != inputs.len() {
                    return Err(mismatch("custom", "vjp returned wrong number of gradients".into()));
                }
                for (&p, part) in inputs.iter().zip(parts) {
                    if part.len() != val(p).len() {
                        return Err(mismatch("custom", "vjp gradient shape differs from input".into()));
                    }
                    if wants(p) {
                        slot(grads, nodes, p).iter_mut().zip(part.data()).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_vjp(
        &self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = (tq.rows(), tq.cols());
        let batch = rows / seq_len;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; rows * width];
        let mut dk = vec![0.0; rows * width];
        let mut dv = vec![0.0; rows * width];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut dp = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let p = &probs[((b * heads + h) * seq_len + i) * seq_len..][..seq_len];
                    let gi = &g[(b * seq_len + i) * width + off..][..dh];
                    let mut dot = 0.0;
                    for j in 0..seq_len {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &vd[(b * seq_len + j) * width + off..][..dh];
                        dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                        dot += p[j] * dp[j];
                        let dvj = &mut dv[(b * seq_len + j) * width + off..][..dh];
                        for (d, s) in dvj.iter_mut().zip(gi) {
                            *d += p[j] * s;
                        }
                    }
                    for j in 0..seq_len {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let kj = &kd[(b * seq_len + j) * width + off..][..dh];
                        let qi = &qd[(b * seq_len + i) * width + off..][..dh];
                        let dqi = &mut dq[(b * seq_len + i) * width + off..][..dh];
                        for (d, s) in dqi.iter_mut().zip(kj) {
                            *d += ds * s;
                        }
                        let dkj = &mut dk[(b * seq_len + j) * width + off..][..dh];
                        for (d, s) in dkj.iter_mut().zip(qi) {
                            *d += ds * s;
                        }
                    }
                }
            }
        }
        for (var, part) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                let d = grads[var.0].get_or_insert_with(|| vec![0.0; rows * width]);
                d.iter_mut().zip(&part).for_each(|(d, s)| *d += s);
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches node shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Moves the gradient out without copying, if one was accumulated.
    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

use std::borrow::Cow;
use std::ops::Range;

use super::gemm::{gemm, MatRef};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Relu { x: Var },
    Tanh { x: Var },
    Conv1d {
        x: Var,
        weight: Var,
        bias: Var,
        width: usize,
        segments: Vec<Range<usize>>,
        patches: Vec<f64>,
    },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    Slice { x: Var, rows: Range<usize>, cols: Range<usize> },
    Gather { table: Var, ids: Vec<usize> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    SegmentSoftmax { x: Var, groups: Vec<Range<usize>> },
    SegmentWeightedSum { weights: Var, x: Var, groups: Vec<Range<usize>> },
    MaskedSoftmax { x: Var },
    NormalizeRows { x: Var, norms: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum { x: Var },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A forward trace. Every primitive appends one node; inputs always precede
/// the nodes that consume them. Parameters can be borrowed as leaves so a
/// trace never copies model weights.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    branch: u64,
    min_relu_margin: f64,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn check_odd(width: usize) -> Result<()> {
    if width.is_multiple_of(2) {
        Err(TensorError::EvenKernel(width))
    } else {
        Ok(())
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branch: FNV_OFFSET,
            min_relu_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a borrowed leaf.
    pub fn leaf(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    /// Records an owned constant (no gradient).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(Cow::Owned(value), false)
    }

    /// Records an owned leaf that takes part in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(Cow::Owned(value), true)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Hash of every data-dependent branch taken so far (ReLU signs and
    /// max-pooling winners). Two traces with equal signatures went through
    /// the same piecewise-linear region.
    pub fn branch_signature(&self) -> u64 {
        self.branch
    }

    /// Smallest |input| seen by any ReLU in this trace.
    pub fn min_relu_margin(&self) -> f64 {
        self.min_relu_margin
    }

    fn mix(&mut self, word: u64) {
        self.branch ^= word;
        self.branch = self.branch.wrapping_mul(FNV_PRIME);
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(TensorError::Rank {
                op,
                expected: 2,
                shape: t.shape().to_vec(),
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, trans_b: false }, &[a, b])
    }

    /// `a (m x k) * b^T` with `b` of shape `n x k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_t", a)?;
        let (n, k2) = self.matrix_dims("matmul_t", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul_t", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), n, k).t(),
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul_t", value, Op::MatMul { a, b, trans_b: true }, &[a, b])
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims("add_bias", x)?;
        let b = self.value(bias);
        if b.rank() != 1 || b.len() != n {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let b = b.data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, v)| *o += v);
        }
        self.push("add_bias", out, Op::AddBias { x, bias }, &[x, bias])
    }

    /// Position-wise affine map: `x * weight + bias`, row by row.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(o, v)| *o += v);
        self.push("add", out, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(o, v)| *o *= v);
        self.push("mul", out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push("scale", out, Op::Scale { x, factor }, &[x])
    }

    /// Elementwise `max(0, x)`. The derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let mut margin = self.min_relu_margin;
        let mut words = Vec::with_capacity(out.len() / 64 + 1);
        for chunk in out.data_mut().chunks_mut(64) {
            let mut word = 0u64;
            for (i, v) in chunk.iter_mut().enumerate() {
                margin = margin.min(v.abs());
                if *v > 0.0 {
                    word |= 1 << i;
                } else {
                    *v = 0.0;
                }
            }
            words.push(word);
        }
        self.min_relu_margin = margin;
        words.into_iter().for_each(|w| self.mix(w));
        self.push("relu", out, Op::Relu { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.push("tanh", out, Op::Tanh { x }, &[x])
    }

    /// Same-length 1-D convolution over the rows of `x` (`L x d_in`) with
    /// zero padding. `weight` has shape `k x d_in x c` (tap-major), `bias`
    /// has length `c`; `k` must be odd.
    pub fn conv1d_same(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        self.conv1d_segments(x, weight, bias, std::slice::from_ref(&(0..rows)))
    }

    /// Like [`Graph::conv1d_same`] but over several sequences packed along
    /// the rows of `x`. The window never crosses a segment boundary; rows not
    /// covered by any segment receive the bias only.
    pub fn conv1d_segments(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        segments: &[Range<usize>],
    ) -> Result<Var> {
        let (rows, d_in) = self.matrix_dims("conv1d", x)?;
        let w = self.value(weight);
        if w.rank() != 3 || w.shape()[1] != d_in {
            return Err(self.mismatch("conv1d", x, weight));
        }
        let (width, channels) = (w.shape()[0], w.shape()[2]);
        check_odd(width)?;
        let b = self.value(bias);
        if b.rank() != 1 || b.len() != channels {
            return Err(self.mismatch("conv1d", weight, bias));
        }
        for seg in segments {
            if seg.end > rows || seg.start > seg.end {
                return Err(TensorError::IndexOutOfRange {
                    op: "conv1d",
                    index: seg.end,
                    bound: rows,
                });
            }
        }
        let half = width / 2;
        let span = width * d_in;
        let xs = self.value(x).data();
        let mut patches = vec![0.0; rows * span];
        for seg in segments {
            for t in seg.clone() {
                for tap in 0..width {
                    let Some(src) = (t + tap).checked_sub(half) else {
                        continue;
                    };
                    if src < seg.start || src >= seg.end {
                        continue;
                    }
                    patches[t * span + tap * d_in..t * span + (tap + 1) * d_in]
                        .copy_from_slice(&xs[src * d_in..(src + 1) * d_in]);
                }
            }
        }
        let mut out = vec![0.0; rows * channels];
        for row in out.chunks_mut(channels) {
            row.copy_from_slice(b.data());
        }
        gemm(
            MatRef::row_major(&patches, rows, span),
            MatRef::row_major(w.data(), span, channels),
            &mut out,
            true,
        );
        let value = Tensor::new(vec![rows, channels], out)?;
        let op = Op::Conv1d {
            x,
            weight,
            bias,
            width,
            segments: segments.to_vec(),
            patches,
        };
        self.push("conv1d", value, op, &[x, weight, bias])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::EmptySelection {
            op: "concat_cols",
            index: 0,
        })?;
        let (rows, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != rows {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &c) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let value = Tensor::new(vec![rows, total], out)?;
        self.push("concat_cols", value, Op::ConcatCols { parts: parts.to_vec() }, parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::EmptySelection {
            op: "concat_rows",
            index: 0,
        })?;
        let (_, cols) = self.matrix_dims("concat_rows", first)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if c != cols {
                return Err(self.mismatch("concat_rows", first, p));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push("concat_rows", value, Op::ConcatRows { parts: parts.to_vec() }, parts)
    }

    /// Copies the sub-matrix `x[rows, cols]`.
    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice", x)?;
        if rows.end > r || cols.end > c || rows.start > rows.end || cols.start > cols.end {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                left: vec![r, c],
                right: vec![rows.end, cols.end],
            });
        }
        let src = self.value(x).data();
        let width = cols.len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for i in rows.clone() {
            data.extend_from_slice(&src[i * c + cols.start..i * c + cols.end]);
        }
        let value = Tensor::new(vec![rows.len(), width], data)?;
        self.push("slice", value, Op::Slice { x, rows, cols }, &[x])
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("gather_rows", table)?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push("gather_rows", value, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    fn check_groups(&self, op: &'static str, rows: usize, groups: &[Range<usize>]) -> Result<()> {
        for (i, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(TensorError::EmptySelection { op, index: i });
            }
            if g.end > rows {
                return Err(TensorError::IndexOutOfRange {
                    op,
                    index: g.end,
                    bound: rows,
                });
            }
        }
        Ok(())
    }

    /// Per-column maximum over each group of rows; output is `groups x d`.
    /// Ties go to the earliest row.
    pub fn segment_max(&mut self, x: Var, groups: &[Range<usize>]) -> Result<Var> {
        let (rows, d) = self.matrix_dims("segment_max", x)?;
        self.check_groups("segment_max", rows, groups)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; groups.len() * d];
        let mut argmax = vec![0usize; groups.len() * d];
        for (gi, g) in groups.iter().enumerate() {
            for c in 0..d {
                let mut best = g.start;
                for r in g.clone().skip(1) {
                    if src[r * d + c] > src[best * d + c] {
                        best = r;
                    }
                }
                out[gi * d + c] = src[best * d + c];
                argmax[gi * d + c] = best;
            }
        }
        for &a in &argmax {
            self.mix(a as u64);
        }
        let value = Tensor::new(vec![groups.len(), d], out)?;
        self.push("segment_max", value, Op::SegmentMax { x, argmax }, &[x])
    }

    /// Softmax over the entries of each group (`x` is a column `T x 1` or a
    /// vector of length `T`). Entries outside every group come out as 0.
    pub fn segment_softmax(&mut self, x: Var, groups: &[Range<usize>]) -> Result<Var> {
        let t = self.value(x);
        if t.cols() != 1 && t.rank() != 1 {
            return Err(TensorError::Rank {
                op: "segment_softmax",
                expected: 1,
                shape: t.shape().to_vec(),
            });
        }
        let n = t.len();
        self.check_groups("segment_softmax", n, groups)?;
        let src = t.data();
        let mut out = vec![0.0; n];
        for g in groups {
            let max = src[g.clone()].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in g.clone() {
                out[i] = (src[i] - max).exp();
                sum += out[i];
            }
            out[g.clone()].iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            "segment_softmax",
            value,
            Op::SegmentSoftmax {
                x,
                groups: groups.to_vec(),
            },
            &[x],
        )
    }

    /// Output row `g` is `sum_{t in groups[g]} weights[t] * x[t]`.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Var,
        x: Var,
        groups: &[Range<usize>],
    ) -> Result<Var> {
        let (rows, d) = self.matrix_dims("segment_weighted_sum", x)?;
        if self.value(weights).len() != rows {
            return Err(self.mismatch("segment_weighted_sum", weights, x));
        }
        self.check_groups("segment_weighted_sum", rows, groups)?;
        let w = self.value(weights).data();
        let src = self.value(x).data();
        let mut out = vec![0.0; groups.len() * d];
        for (gi, g) in groups.iter().enumerate() {
            let dst = &mut out[gi * d..(gi + 1) * d];
            for t in g.clone() {
                let wt = w[t];
                dst.iter_mut()
                    .zip(&src[t * d..(t + 1) * d])
                    .for_each(|(o, v)| *o += wt * v);
            }
        }
        let value = Tensor::new(vec![groups.len(), d], out)?;
        let op = Op::SegmentWeightedSum {
            weights,
            x,
            groups: groups.to_vec(),
        };
        self.push("segment_weighted_sum", value, op, &[weights, x])
    }

    /// Row-wise `softmax(x + mask)`; `mask` holds additive terms (0 or
    /// `-inf`). Masked entries are exactly 0 in the result.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let t = self.value(x);
        if let Some(m) = mask {
            if m.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    left: t.shape().to_vec(),
                    right: m.shape().to_vec(),
                });
            }
        }
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for (r, row) in out.chunks_mut(cols.max(1)).enumerate() {
            if let Some(m) = mask {
                row.iter_mut()
                    .zip(m.row(r))
                    .for_each(|(v, a)| *v += a);
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::FullyMasked { row: r });
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = if *v == f64::NEG_INFINITY {
                    0.0
                } else {
                    (*v - max).exp()
                };
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("masked_softmax", value, Op::MaskedSoftmax { x }, &[x])
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for (r, row) in out.chunks_mut(cols).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(TensorError::ZeroNorm {
                    op: "normalize_rows",
                    row: r,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("normalize_rows", value, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.matrix_dims("layer_norm", x)?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normalized = vec![0.0; rows * d];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                normalized[r * d + c] = xh;
                out[r * d + c] = xh * g[c] + b[c];
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            normalized,
            inv_std,
        };
        self.push("layer_norm", value, op, &[x, gamma, beta])
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![rows, cols],
                right: vec![targets.len()],
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: target,
                    bound: cols,
                });
            }
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for c in 0..cols {
                probs[r * cols + c] = (row[c] - max).exp() / sum;
            }
            total += lse - row[target];
        }
        let value = Tensor::scalar(total / rows.max(1) as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", value, op, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    /// Reverse pass from a scalar output. Consumes the trace; gradients are
    /// returned for every leaf that requires them.
    pub fn backward(self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(TensorError::NotScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backprop(i, &gy, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data: g,
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = if *trans_b { bv.shape()[0] } else { bv.shape()[1] };
                let gy_m = MatRef::row_major(gy, m, n);
                if let Some(ga) = self.slot(grads, *a) {
                    let bm = if *trans_b {
                        MatRef::row_major(bv.data(), n, k)
                    } else {
                        MatRef::row_major(bv.data(), k, n).t()
                    };
                    gemm(gy_m, bm, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let am = MatRef::row_major(av.data(), m, k);
                    if *trans_b {
                        gemm(gy_m.t(), am, gb, true);
                    } else {
                        gemm(am.t(), gy_m, gb, true);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let n = self.value(*bias).len();
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in gy.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(g) = self.slot(grads, v) {
                        g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Mul { a, b } => {
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((g, d), o) in ga.iter_mut().zip(gy).zip(bv) {
                        *g += d * o;
                    }
                }
                let av = self.value(*a).data();
                if let Some(gb) = self.slot(grads, *b) {
                    for ((g, d), o) in gb.iter_mut().zip(gy).zip(av) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(gy).for_each(|(g, d)| *g += factor * d);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((g, d), v) in gx.iter_mut().zip(gy).zip(xv) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Tanh { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((g, d), t) in gx.iter_mut().zip(gy).zip(y) {
                        *g += d * (1.0 - t * t);
                    }
                }
            }
            Op::Conv1d {
                x,
                weight,
                bias,
                width,
                segments,
                patches,
            } => {
                let (rows, d_in) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let wv = self.value(*weight);
                let channels = wv.shape()[2];
                let span = width * d_in;
                let gy_m = MatRef::row_major(gy, rows, channels);
                if let Some(gw) = self.slot(grads, *weight) {
                    gemm(MatRef::row_major(patches, rows, span).t(), gy_m, gw, true);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in gy.chunks(channels) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut gpatch = vec![0.0; rows * span];
                    gemm(
                        gy_m,
                        MatRef::row_major(wv.data(), span, channels).t(),
                        &mut gpatch,
                        false,
                    );
                    let half = width / 2;
                    let gx = self.slot(grads, *x).expect("requires_grad checked");
                    for seg in segments {
                        for t in seg.clone() {
                            for tap in 0..*width {
                                let Some(src) = (t + tap).checked_sub(half) else {
                                    continue;
                                };
                                if src < seg.start || src >= seg.end {
                                    continue;
                                }
                                let from = &gpatch[t * span + tap * d_in..t * span + (tap + 1) * d_in];
                                gx[src * d_in..(src + 1) * d_in]
                                    .iter_mut()
                                    .zip(from)
                                    .for_each(|(g, d)| *g += d);
                            }
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if let Some(g) = self.slot(grads, p) {
                        for r in 0..rows {
                            g[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(&gy[r * total + offset..r * total + offset + c])
                                .for_each(|(g, d)| *g += d);
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(g) = self.slot(grads, p) {
                        g.iter_mut()
                            .zip(&gy[offset..offset + n])
                            .for_each(|(g, d)| *g += d);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, rows, cols } => {
                let c = self.value(*x).shape()[1];
                let width = cols.len();
                if let Some(g) = self.slot(grads, *x) {
                    for (k, r) in rows.clone().enumerate() {
                        g[r * c + cols.start..r * c + cols.end]
                            .iter_mut()
                            .zip(&gy[k * width..(k + 1) * width])
                            .for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).shape()[1];
                if let Some(g) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        g[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&gy[r * d..(r + 1) * d])
                            .for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                let d = self.value(*x).shape()[1];
                if let Some(g) = self.slot(grads, *x) {
                    for (k, (&row, dv)) in argmax.iter().zip(gy).enumerate() {
                        g[row * d + k % d] += dv;
                    }
                }
            }
            Op::SegmentSoftmax { x, groups } => {
                if let Some(g) = self.slot(grads, *x) {
                    for grp in groups {
                        let dot: f64 = grp.clone().map(|t| y[t] * gy[t]).sum();
                        for t in grp.clone() {
                            g[t] += y[t] * (gy[t] - dot);
                        }
                    }
                }
            }
            Op::SegmentWeightedSum { weights, x, groups } => {
                let xv = self.value(*x);
                let d = xv.shape()[1];
                let xs = xv.data();
                if let Some(gw) = self.slot(grads, *weights) {
                    for (gi, grp) in groups.iter().enumerate() {
                        let gyr = &gy[gi * d..(gi + 1) * d];
                        for t in grp.clone() {
                            gw[t] += gyr.iter().zip(&xs[t * d..(t + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                let w = self.value(*weights).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for (gi, grp) in groups.iter().enumerate() {
                        let gyr = &gy[gi * d..(gi + 1) * d];
                        for t in grp.clone() {
                            gx[t * d..(t + 1) * d]
                                .iter_mut()
                                .zip(gyr)
                                .for_each(|(g, dv)| *g += w[t] * dv);
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                let cols = node.value.cols().max(1);
                if let Some(g) = self.slot(grads, *x) {
                    for ((grow, yrow), gyrow) in g.chunks_mut(cols).zip(y.chunks(cols)).zip(gy.chunks(cols)) {
                        let dot: f64 = yrow.iter().zip(gyrow).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            grow[c] += yrow[c] * (gyrow[c] - dot);
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let cols = node.value.cols();
                if let Some(g) = self.slot(grads, *x) {
                    for (r, norm) in norms.iter().enumerate() {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &gy[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            g[r * cols + c] += (gr[c] - yr[c] * dot) / norm;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let d = self.value(*gamma).len();
                let gv = self.value(*gamma).data();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (k, (dv, xh)) in gy.iter().zip(normalized).enumerate() {
                        gg[k % d] += dv * xh;
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for (k, dv) in gy.iter().enumerate() {
                        gb[k % d] += dv;
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, is) in inv_std.iter().enumerate() {
                        let xh = &normalized[r * d..(r + 1) * d];
                        let dxh: Vec<f64> = (0..d).map(|c| gy[r * d + c] * gv[c]).collect();
                        let mean_d = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            gx[r * d + c] += is * (dxh[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let cols = probs.len() / rows.max(1);
                let scale = gy[0] / rows.max(1) as f64;
                if let Some(g) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..cols {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            g[r * cols + c] += scale * (probs[r * cols + c] - onehot);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(g) = self.slot(grads, *x) {
                    g.iter_mut().for_each(|v| *v += gy[0]);
                }
            }
        }
    }
}

/// Gradients of one backward pass, addressed by the leaf [`Var`]s of the
/// trace that produced them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the leaf did not require gradients or did not influence
    /// the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

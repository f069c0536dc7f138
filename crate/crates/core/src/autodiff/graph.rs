//! Tape of tensor operations with reverse-mode gradients.

use std::collections::HashMap;

use rand::Rng;

use super::tensor::{gemm, Tensor};
use super::{AutodiffError, Gradients, ParamId, ParameterStore};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; indexes the result of [`Graph::backward_all`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LayerNorm(Var),
    Dropout(Var, Tensor),
    MaskedMean(Var, Vec<bool>),
    Sum(Var),
    BceWithLogits(Var, Tensor),
    SoftmaxXent(Var, Tensor),
    Attention(Box<AttentionSaved>),
}

#[derive(Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    block: usize,
    /// Softmax weights, laid out `[block_index][head][query][key]`.
    probs: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass. A graph supports one backward
/// pass; build a fresh graph per step.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient (not tied to a parameter store).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    fn mismatch(op: &'static str, a: [usize; 2], b: [usize; 2]) -> AutodiffError {
        AutodiffError::ShapeMismatch { op, left: a, right: b }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(Self::mismatch("matmul", sa, sb));
        }
        let mut out = Tensor::zeros(sa[0], sb[1]);
        gemm(self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[1] {
            return Err(Self::mismatch("matmul_t", sa, sb));
        }
        let mut out = Tensor::zeros(sa[0], sb[0]);
        gemm(self.value(a), false, self.value(b), true, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Self::mismatch(name, sa, sb));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_vec(sa[0], sa[1], data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `(n, d) + (1, d)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != [1, sa[1]] {
            return Err(Self::mismatch("add_row", sa, sr));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sa[0] {
            for (x, y) in out.row_mut(i).iter_mut().zip(&r) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// `(n, d) ⊙ (1, d)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != [1, sa[1]] {
            return Err(Self::mismatch("mul_row", sa, sr));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sa[0] {
            for (x, y) in out.row_mut(i).iter_mut().zip(&r) {
                *x *= y;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    /// `(n, d) ⊙ (n, 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, AutodiffError> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != [sa[0], 1] {
            return Err(Self::mismatch("mul_col", sa, sc));
        }
        let mut out = self.value(a).clone();
        for i in 0..sa[0] {
            let s = self.nodes[col.0].value.data()[i];
            out.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(out, Op::MulCol(a, col), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let rows = parts.first().map(|&p| self.shape(p)[0]).unwrap_or(0);
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(Self::mismatch("concat_cols", [rows, cols], s));
            }
            cols += s[1];
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(a);
        if start + width > s[1] {
            return Err(Self::mismatch("slice_cols", s, [start, width]));
        }
        let mut out = Tensor::zeros(s[0], width);
        for r in 0..s[0] {
            out.row_mut(r).copy_from_slice(&self.nodes[a.0].value.row(r)[start..start + width]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let cols = parts.first().map(|&p| self.shape(p)[1]).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[1] != cols {
                return Err(Self::mismatch("concat_rows", [rows, cols], s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row `i` of the result is row `indices[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let s = self.shape(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Self::mismatch("gather_rows", s, [bad, 0]));
        }
        let mut out = Tensor::zeros(indices.len(), s[1]);
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.nodes[a.0].value.row(i));
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, move |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm(a), rg)
    }

    /// Multiplies by a fixed mask (already scaled when rescaling is wanted).
    pub fn dropout_with_mask(&mut self, a: Var, mask: Tensor) -> Result<Var, AutodiffError> {
        let s = self.shape(a);
        if mask.shape() != s {
            return Err(Self::mismatch("dropout", s, mask.shape()));
        }
        let data = self.value(a).data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec(s[0], s[1], data), Op::Dropout(a, mask), rg))
    }

    /// Zeroes each element with probability `rate`. With `rescale` survivors
    /// are multiplied by `1 / (1 - rate)`; without it the op only removes
    /// values, which is how missing fields are simulated.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng, rescale: bool) -> Result<Var, AutodiffError> {
        let s = self.shape(a);
        let keep = if rate >= 1.0 {
            0.0
        } else if rescale {
            1.0 / (1.0 - rate)
        } else {
            1.0
        };
        let mask: Vec<f64> = (0..s[0] * s[1])
            .map(|_| if rate > 0.0 && rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.dropout_with_mask(a, Tensor::from_vec(s[0], s[1], mask))
    }

    /// Column means over rows where `mask` is true, as a `1 × d` row.
    pub fn masked_mean(&mut self, a: Var, mask: &[bool]) -> Result<Var, AutodiffError> {
        let s = self.shape(a);
        if mask.len() != s[0] {
            return Err(Self::mismatch("masked_mean", s, [mask.len(), 1]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(AutodiffError::EmptyMask);
        }
        let mut out = Tensor::zeros(1, s[1]);
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (o, x) in out.data_mut().iter_mut().zip(self.nodes[a.0].value.row(r)) {
                *o += x;
            }
        }
        out.data_mut().iter_mut().for_each(|x| *x /= count as f64);
        let rg = self.rg(a);
        Ok(self.push(out, Op::MaskedMean(a, mask.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Element-wise binary cross-entropy of `sigmoid(logits)` against
    /// `targets`, in the overflow-free form `max(z,0) - z·y + ln(1 + e^-|z|)`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var, AutodiffError> {
        let s = self.shape(logits);
        if targets.shape() != s {
            return Err(Self::mismatch("bce_with_logits", s, targets.shape()));
        }
        let data = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .collect();
        let rg = self.rg(logits);
        Ok(self.push(Tensor::from_vec(s[0], s[1], data), Op::BceWithLogits(logits, targets), rg))
    }

    /// Row-wise categorical cross-entropy `-Σ y·log softmax(z)` via
    /// log-sum-exp; output is `n × 1`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Tensor) -> Result<Var, AutodiffError> {
        let s = self.shape(logits);
        if targets.shape() != s {
            return Err(Self::mismatch("softmax_cross_entropy", s, targets.shape()));
        }
        let z = self.value(logits);
        let mut out = Vec::with_capacity(s[0]);
        for r in 0..s[0] {
            let row = z.row(r);
            let lse = log_sum_exp(row);
            let l: f64 = row.iter().zip(targets.row(r)).map(|(&zi, &yi)| yi * (lse - zi)).sum();
            out.push(l);
        }
        let rg = self.rg(logits);
        Ok(self.push(Tensor::column(out), Op::SoftmaxXent(logits, targets), rg))
    }

    /// Scaled dot-product self-attention over contiguous row blocks.
    ///
    /// `q`, `k`, `v` are `(n_blocks · block) × d`. Rows `[b·block, (b+1)·block)`
    /// form one sequence and attend only within it. Columns are split into
    /// `heads` equal groups. Keys with `key_mask[row] == false` receive zero
    /// weight; a block with no valid key yields zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        block: usize,
        key_mask: &[bool],
    ) -> Result<Var, AutodiffError> {
        let s = self.shape(q);
        if self.shape(k) != s || self.shape(v) != s {
            return Err(Self::mismatch("attention", s, self.shape(k)));
        }
        if heads == 0 || s[1] % heads != 0 || block == 0 || s[0] % block != 0 || key_mask.len() != s[0] {
            return Err(Self::mismatch("attention", s, [block, heads]));
        }
        let dk = s[1] / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let n_blocks = s[0] / block;
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let mut out = Tensor::zeros(s[0], s[1]);
        let mut probs = vec![0.0; n_blocks * heads * block * block];
        let mut scores = vec![0.0; block];
        for b in 0..n_blocks {
            let base = b * block;
            let any_key = key_mask[base..base + block].iter().any(|&m| m);
            if !any_key {
                continue;
            }
            for h in 0..heads {
                let c0 = h * dk;
                for i in 0..block {
                    let qi = &qt.row(base + i)[c0..c0 + dk];
                    for j in 0..block {
                        scores[j] = if key_mask[base + j] {
                            let kj = &kt.row(base + j)[c0..c0 + dk];
                            qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    softmax_in_place(&mut scores);
                    let p_off = ((b * heads + h) * block + i) * block;
                    probs[p_off..p_off + block].copy_from_slice(&scores);
                    let orow = &mut out.row_mut(base + i)[c0..c0 + dk];
                    for (j, &p) in scores.iter().enumerate() {
                        if p != 0.0 {
                            let vj = &vt.row(base + j)[c0..c0 + dk];
                            for (o, x) in orow.iter_mut().zip(vj) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let saved = AttentionSaved { q, k, v, heads, block, probs };
        Ok(self.push(out, Op::Attention(Box::new(saved)), rg))
    }

    /// Reverse pass from a `1 × 1` loss. Returns gradients for every bound
    /// parameter.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AutodiffError> {
        let grads = self.backward_all(loss)?;
        let mut out = Gradients::default();
        for (&id, &v) in &self.params {
            let g = grads[v.0].clone().unwrap_or_else(|| {
                let s = self.shape(v);
                Tensor::zeros(s[0], s[1])
            });
            out.insert(id, g);
        }
        Ok(out)
    }

    /// Reverse pass returning the gradient of every node that requires one.
    pub fn backward_all(&mut self, loss: Var) -> Result<Vec<Option<Tensor>>, AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::DoubleBackward);
        }
        if self.shape(loss) != [1, 1] {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss)));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(val(*a).rows(), val(*a).cols());
                    gemm(g, false, val(*b), true, &mut ga, false);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(val(*b).rows(), val(*b).cols());
                    gemm(val(*a), true, g, false, &mut gb, false);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(val(*a).rows(), val(*a).cols());
                    gemm(g, false, val(*b), false, &mut ga, false);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(val(*b).rows(), val(*b).cols());
                    gemm(g, true, val(*a), false, &mut gb, false);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, elementwise(g, val(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, elementwise(g, val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let r = val(*row);
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        ga.row_mut(i).iter_mut().zip(r.data()).for_each(|(x, s)| *x *= s);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*row) {
                    self.accumulate(grads, *row, column_sums(&elementwise(g, val(*a), |x, y| x * y)));
                }
            }
            Op::MulCol(a, col) => {
                let c = val(*col);
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        let s = c.data()[i];
                        ga.row_mut(i).iter_mut().for_each(|x| *x *= s);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*col) {
                    let av = val(*a);
                    let gc = (0..g.rows())
                        .map(|i| g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *col, Tensor::column(gc));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.rg(p) {
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let s = val(*a).shape();
                let mut ga = Tensor::zeros(s[0], s[1]);
                for r in 0..s[0] {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let s = val(p).shape();
                    if self.rg(p) {
                        let data = g.data()[off * s[1]..(off + s[0]) * s[1]].to_vec();
                        self.accumulate(grads, p, Tensor::from_vec(s[0], s[1], data));
                    }
                    off += s[0];
                }
            }
            Op::GatherRows(a, idx) => {
                let s = val(*a).shape();
                let mut ga = Tensor::zeros(s[0], s[1]);
                for (r, &src) in idx.iter().enumerate() {
                    ga.row_mut(src).iter_mut().zip(g.row(r)).for_each(|(x, d)| *x += d);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, elementwise(g, y, |d, s| d * s * (1.0 - s))),
            Op::Tanh(a) => self.accumulate(grads, *a, elementwise(g, y, |d, t| d * (1.0 - t * t))),
            Op::Relu(a) => {
                self.accumulate(grads, *a, elementwise(g, val(*a), |d, x| if x > 0.0 { d } else { 0.0 }))
            }
            Op::Ln(a) => self.accumulate(grads, *a, elementwise(g, val(*a), |d, x| d / x)),
            Op::Clamp(a, lo, hi) => self.accumulate(
                grads,
                *a,
                elementwise(g, val(*a), |d, x| if x >= *lo && x <= *hi { d } else { 0.0 }),
            ),
            Op::Softmax(a) => {
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yy, gg)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yy * (gg - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm(a) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let xr = x.row(r);
                    let n = xr.len() as f64;
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (o, (gg, yy)) in ga.row_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                        *o = inv * (gg - mean_g - yy * mean_gy);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Dropout(a, mask) => self.accumulate(grads, *a, elementwise(g, mask, |d, m| d * m)),
            Op::MaskedMean(a, mask) => {
                let s = val(*a).shape();
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let mut ga = Tensor::zeros(s[0], s[1]);
                for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    ga.row_mut(r).iter_mut().zip(g.data()).for_each(|(x, d)| *x = d / count);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let s = val(*a).shape();
                self.accumulate(grads, *a, Tensor::filled(s[0], s[1], g.item()));
            }
            Op::BceWithLogits(z, t) => {
                let zv = val(*z);
                let mut gz = Tensor::zeros(zv.rows(), zv.cols());
                for (o, ((zz, yy), gg)) in gz.data_mut().iter_mut().zip(zv.data().iter().zip(t.data()).zip(g.data())) {
                    *o = gg * (sigmoid(*zz) - yy);
                }
                self.accumulate(grads, *z, gz);
            }
            Op::SoftmaxXent(z, t) => {
                let zv = val(*z);
                let mut gz = zv.clone();
                for r in 0..zv.rows() {
                    let row = gz.row_mut(r);
                    softmax_in_place(row);
                    let ysum: f64 = t.row(r).iter().sum();
                    let d = g.data()[r];
                    for (o, yy) in row.iter_mut().zip(t.row(r)) {
                        *o = d * (*o * ysum - yy);
                    }
                }
                self.accumulate(grads, *z, gz);
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
        }
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (qt, kt, vt) = (&self.nodes[s.q.0].value, &self.nodes[s.k.0].value, &self.nodes[s.v.0].value);
        let [rows, cols] = qt.shape();
        let dk = cols / s.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let block = s.block;
        let mut gq = Tensor::zeros(rows, cols);
        let mut gk = Tensor::zeros(rows, cols);
        let mut gv = Tensor::zeros(rows, cols);
        let mut dp = vec![0.0; block];
        for b in 0..rows / block {
            let base = b * block;
            for h in 0..s.heads {
                let c0 = h * dk;
                for i in 0..block {
                    let p_off = ((b * s.heads + h) * block + i) * block;
                    let p = &s.probs[p_off..p_off + block];
                    let go = &g.row(base + i)[c0..c0 + dk];
                    // dV_j += p_ij · dO_i ; dP_ij = dO_i · V_j
                    for j in 0..block {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &vt.row(base + j)[c0..c0 + dk];
                        dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let gvj = &mut gv.row_mut(base + j)[c0..c0 + dk];
                        for (x, d) in gvj.iter_mut().zip(go) {
                            *x += p[j] * d;
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..block {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let kj = &kt.row(base + j)[c0..c0 + dk];
                        let gqi = &mut gq.row_mut(base + i)[c0..c0 + dk];
                        for (x, kk) in gqi.iter_mut().zip(kj) {
                            *x += ds * kk;
                        }
                        let qi = &qt.row(base + i)[c0..c0 + dk];
                        let gkj = &mut gk.row_mut(base + j)[c0..c0 + dk];
                        for (x, qq) in gkj.iter_mut().zip(qi) {
                            *x += ds * qq;
                        }
                    }
                }
            }
        }
        self.accumulate(grads, s.q, gq);
        self.accumulate(grads, s.k, gk);
        self.accumulate(grads, s.v, gv);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        out.data_mut().iter_mut().zip(g.row(r)).for_each(|(o, x)| *o += x);
    }
    out
}

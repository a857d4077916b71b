use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Clamp applied to logits before `log_sigmoid`.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Handle to a node in a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Gradients of a scalar loss with respect to every tracked leaf that the
/// loss depends on. Leaves that do not influence the loss get no entry.
#[derive(Debug, Default, Clone)]
pub struct GradientMap {
    grads: HashMap<Var, Tensor>,
}

impl GradientMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.grads.iter()
    }
}

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Scalar,
    Row,
}

impl Bcast {
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Row => i % cols,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    LogSigmoid(Var),
    Min(Var, Var),
    LayerNorm(Var, f64),
    MaskedSoftmax(Var),
    LogSumExp(Var),
    CosineRows(Var, Var),
    L1(Var, Var),
    CrossEntropy(Var, Rc<Vec<Option<usize>>>),
    GaussianKl(Var, Var),
    Reparam(Var, Var, Var),
    Dropout(Var, Rc<Vec<f64>>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward pass.
///
/// Single-owner while recording. Nodes are appended in evaluation order,
/// which is a valid topological order for the reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, &[s])),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` computed without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn cos_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot, na, nb)
}

const COS_EPS: f64 = 1e-12;

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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradient-tracked leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Dispatch a parameterless primitive by name.
    pub fn apply(&mut self, op_name: &str, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Invalid(format!(
                    "{op_name} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match op_name {
            "matmul" => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            "add" => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            "sub" => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            "mul" => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            "concat_rows" => self.concat_rows(inputs),
            "concat" | "concat_cols" => self.concat_cols(inputs),
            "mean_pool" => arity(1).and_then(|_| self.mean_rows(inputs[0])),
            "sum" => arity(1).and_then(|_| self.sum(inputs[0])),
            "mean" => arity(1).and_then(|_| self.mean(inputs[0])),
            "tanh" => arity(1).map(|_| self.tanh(inputs[0])),
            "sigmoid" => arity(1).map(|_| self.sigmoid(inputs[0])),
            "relu" => arity(1).map(|_| self.relu(inputs[0])),
            "exp" => arity(1).map(|_| self.exp(inputs[0])),
            "abs" => arity(1).map(|_| self.abs(inputs[0])),
            "log_sigmoid" => arity(1).map(|_| self.log_sigmoid(inputs[0])),
            "transpose" => arity(1).and_then(|_| self.transpose(inputs[0])),
            "layer_norm" => arity(1).and_then(|_| self.layer_norm(inputs[0], 1e-12)),
            "softmax" => arity(1).and_then(|_| self.softmax(inputs[0])),
            "log_sum_exp" => arity(1).and_then(|_| self.log_sum_exp(inputs[0])),
            "cosine_similarity" => arity(2).and_then(|_| self.cosine_rows(inputs[0], inputs[1])),
            "l1" => arity(2).and_then(|_| self.l1(inputs[0], inputs[1])),
            "min" => arity(2).and_then(|_| self.minimum(inputs[0], inputs[1])),
            "gaussian_kl" => arity(2).and_then(|_| self.gaussian_kl(inputs[0], inputs[1])),
            "reparameterize" => {
                arity(3).and_then(|_| self.reparameterize(inputs[0], inputs[1], inputs[2]))
            }
            other => Err(Error::Invalid(format!("unknown primitive {other}"))),
        }
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Bcast::Same);
        }
        if self.value(b).numel() == 1 {
            return Ok(Bcast::Scalar);
        }
        if let [_, c] = sa {
            if sb == [1, *c] || sb == [*c] {
                return Ok(Bcast::Row);
            }
        }
        Err(Error::shape(op, &[sa, sb]))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let mode = self.bcast(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let cols = av.shape().last().copied().unwrap_or(1);
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[mode.index(i, cols)]))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, mk(a, b, mode), &[a, b]))
    }

    /// `a + b`; `b` may be same-shaped, a scalar, or a row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let t = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| f(x)).collect(),
        };
        self.push(t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `ln σ(x)` with `x` clamped to `±LOGIT_CLAMP`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| log_sigmoid(x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)),
            Op::LogSigmoid(a),
        )
    }

    /// Elementwise minimum of two same-shaped tensors.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("min", &[self.shape(a), self.shape(b)]));
        }
        self.binary("min", a, b, f64::min, |a, b, _| Op::Min(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[self.shape(a), self.shape(b)]));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "transpose")?;
        let data = transpose_raw(self.value(a).data(), r, c);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(a)
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", &[self.shape(a), shape]))?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Stack rank-2 inputs vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_rows of nothing".into()))?;
        let (_, c) = dims2(self.value(first), "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c2) = dims2(self.value(p), "concat_rows")?;
            if c2 != c {
                return Err(Error::shape("concat_rows", &[self.shape(first), self.shape(p)]));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Stack rank-2 inputs horizontally.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_cols of nothing".into()))?;
        let (r, _) = dims2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = dims2(self.value(p), "concat_cols")?;
            if r2 != r {
                return Err(Error::shape("concat_cols", &[self.shape(first), self.shape(p)]));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![r, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", &[self.shape(a), &[start, len]]));
        }
        let av = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let t = Tensor::new(vec![r, len], data)?;
        Ok(self.push(t, Op::SliceCols(a, start), &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", &[self.shape(a), &[start, len]]));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        Ok(self.push(t, Op::SliceRows(a, start), &[a]))
    }

    /// Row `i` of the output is row `idx[i]` of `a`. Rows may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::Invalid("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Index { index: bad, len: r });
        }
        let av = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(av.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(t, Op::GatherRows(a, idx), &[a]))
    }

    /// Mean over rows: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "mean_pool")?;
        let av = self.value(a);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (o, x) in data.iter_mut().zip(av.row(i)) {
                *o += x;
            }
        }
        data.iter_mut().for_each(|x| *x /= r as f64);
        let t = Tensor::new(vec![1, c], data)?;
        Ok(self.push(t, Op::MeanRows(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(a), &[a]))
    }

    /// Normalize each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "layer_norm")?;
        let av = self.value(a);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = av.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            data.extend(row.iter().map(|x| (x - mu) * inv));
        }
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::LayerNorm(a, eps), &[a]))
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// true. Masked positions come out as exact zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "masked_softmax")?;
        if mask.len() != r * c {
            return Err(Error::shape("masked_softmax", &[self.shape(a), &[mask.len()]]));
        }
        let av = self.value(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = av.row(i);
            let m = &mask[i * c..(i + 1) * c];
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, &ok)| ok)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::FullyMasked { row: i });
            }
            let out = &mut data[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if m[j] {
                    out[j] = (row[j] - mx).exp();
                    z += out[j];
                }
            }
            out.iter_mut().for_each(|x| *x /= z);
        }
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::MaskedSoftmax(a), &[a]))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        self.masked_softmax(a, &vec![true; n])
    }

    /// Row-wise log-sum-exp: `[m, n] -> [m, 1]`.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let (r, _) = dims2(self.value(a), "log_sum_exp")?;
        let av = self.value(a);
        let data = (0..r)
            .map(|i| {
                let row = av.row(i);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
            })
            .collect();
        let t = Tensor::new(vec![r, 1], data)?;
        Ok(self.push(t, Op::LogSumExp(a), &[a]))
    }

    /// Row-wise cosine similarity of two same-shaped matrices: `[m, n] -> [m, 1]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, _) = dims2(self.value(a), "cosine_similarity")?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("cosine_similarity", &[self.shape(a), self.shape(b)]));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data = (0..r)
            .map(|i| {
                let (dot, na, nb) = cos_parts(av.row(i), bv.row(i));
                dot / (na * nb).max(COS_EPS)
            })
            .collect();
        let t = Tensor::new(vec![r, 1], data)?;
        Ok(self.push(t, Op::CosineRows(a, b), &[a, b]))
    }

    /// Sum of absolute differences: scalar.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("l1", &[self.shape(a), self.shape(b)]));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::L1(a, b), &[a, b]))
    }

    /// Mean token cross-entropy of `logits: [n, vocab]` against `targets`;
    /// `None` marks padding. All-padding yields 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, v) = dims2(self.value(logits), "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", &[self.shape(logits), &[targets.len()]]));
        }
        if let Some(&id) = targets.iter().flatten().find(|&&id| id >= v) {
            return Err(Error::TokenOutOfRange { id, vocab: v });
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = lv.row(i);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, Rc::new(targets.to_vec())),
            &[logits],
        ))
    }

    /// `KL(N(mu, diag(exp(logvar))) || N(0, I))`, summed over entries.
    pub fn gaussian_kl(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        if self.shape(mu) != self.shape(logvar) {
            return Err(Error::shape("gaussian_kl", &[self.shape(mu), self.shape(logvar)]));
        }
        let s: f64 = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(logvar).data())
            .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
            .sum();
        Ok(self.push(Tensor::scalar(0.5 * s), Op::GaussianKl(mu, logvar), &[mu, logvar]))
    }

    /// `mu + exp(logvar / 2) * noise`, with the noise supplied by the caller.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, noise: Var) -> Result<Var> {
        let s = self.shape(mu);
        if s != self.shape(logvar) || s != self.shape(noise) {
            return Err(Error::shape(
                "reparameterize",
                &[s, self.shape(logvar), self.shape(noise)],
            ));
        }
        let data = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(logvar).data())
            .zip(self.value(noise).data())
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let t = Tensor::new(s.to_vec(), data)?;
        Ok(self.push(t, Op::Reparam(mu, logvar, noise), &[mu, logvar, noise]))
    }

    /// Inverted dropout. A zero rate returns `a` unchanged without recording.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::Invalid(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let av = self.value(a);
        let t = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        )?;
        Ok(self.push(t, Op::Dropout(a, Rc::new(mask)), &[a]))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        if self.shape(loss) != [1] {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = GradientMap::default();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                out.grads.insert(Var(id), g);
                continue;
            }
            for (input, gi) in self.vjp(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .data
                        .iter_mut()
                        .zip(&gi.data)
                        .for_each(|(x, y)| *x += y),
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(out)
    }

    fn reduce_bcast(&self, g: &[f64], mode: Bcast, target: Var) -> Tensor {
        let shape = self.shape(target).to_vec();
        match mode {
            Bcast::Same => Tensor {
                shape,
                data: g.to_vec(),
            },
            Bcast::Scalar => Tensor {
                shape,
                data: vec![g.iter().sum()],
            },
            Bcast::Row => {
                let c = self.value(target).numel();
                let mut data = vec![0.0; c];
                for (i, x) in g.iter().enumerate() {
                    data[i % c] += x;
                }
                Tensor { shape, data }
            }
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data,
        }
    }

    fn vjp(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let y = &node.value;
        let gd = g.data();
        let map1 = |a: Var, f: &dyn Fn(usize, f64) -> f64| -> Vec<(Var, Tensor)> {
            let data = gd.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
            vec![(a, self.like(a, data))]
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b, mode) => vec![
                (*a, self.like(*a, gd.to_vec())),
                (*b, self.reduce_bcast(gd, *mode, *b)),
            ],
            Op::Sub(a, b, mode) => {
                let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                vec![
                    (*a, self.like(*a, gd.to_vec())),
                    (*b, self.reduce_bcast(&neg, *mode, *b)),
                ]
            }
            Op::Mul(a, b, mode) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = av.shape().last().copied().unwrap_or(1);
                let ga = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * bv.data()[mode.index(i, cols)])
                    .collect();
                let gb_full: Vec<f64> = gd.iter().zip(av.data()).map(|(gi, x)| gi * x).collect();
                vec![
                    (*a, self.like(*a, ga)),
                    (*b, self.reduce_bcast(&gb_full, *mode, *b)),
                ]
            }
            Op::Scale(a, c) => map1(*a, &|_, gi| c * gi),
            Op::AddScalar(a) | Op::Reshape(a) => map1(*a, &|_, gi| gi),
            Op::Tanh(a) => map1(*a, &|i, gi| gi * (1.0 - y.data[i] * y.data[i])),
            Op::Sigmoid(a) => map1(*a, &|i, gi| gi * y.data[i] * (1.0 - y.data[i])),
            Op::Relu(a) => {
                let x = self.value(*a);
                map1(*a, &|i, gi| if x.data[i] > 0.0 { gi } else { 0.0 })
            }
            Op::Exp(a) => map1(*a, &|i, gi| gi * y.data[i]),
            Op::Log(a) => {
                let x = self.value(*a);
                map1(*a, &|i, gi| gi / x.data[i])
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                map1(*a, &|i, gi| gi * sign(x.data[i]))
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a);
                map1(*a, &|i, gi| {
                    let v = x.data[i];
                    if v.abs() > LOGIT_CLAMP {
                        0.0
                    } else {
                        gi * (1.0 - sigmoid(v))
                    }
                })
            }
            Op::Min(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let take_a: Vec<bool> = av.data().iter().zip(bv.data()).map(|(x, y)| x <= y).collect();
                let ga = gd.iter().zip(&take_a).map(|(g, &t)| if t { *g } else { 0.0 }).collect();
                let gb = gd.iter().zip(&take_a).map(|(g, &t)| if t { 0.0 } else { *g }).collect();
                vec![(*a, self.like(*a, ga)), (*b, self.like(*b, gb))]
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                let bt = transpose_raw(bv.data(), k, n);
                let ga = matmul_raw(gd, &bt, m, n, k);
                let at = transpose_raw(av.data(), m, k);
                let gb = matmul_raw(&at, gd, k, m, n);
                vec![(*a, self.like(*a, ga)), (*b, self.like(*b, gb))]
            }
            Op::Transpose(a) => {
                let (r, c) = (y.rows(), y.cols());
                vec![(*a, self.like(*a, transpose_raw(gd, r, c)))]
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.value(p).numel();
                        let t = self.like(p, gd[off..off + n].to_vec());
                        off += n;
                        (p, t)
                    })
                    .collect()
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut col = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let (r, c) = (self.value(p).rows(), self.value(p).cols());
                        let mut data = Vec::with_capacity(r * c);
                        for i in 0..r {
                            data.extend_from_slice(&gd[i * total + col..i * total + col + c]);
                        }
                        col += c;
                        (p, self.like(p, data))
                    })
                    .collect()
            }
            Op::SliceCols(a, start) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                let len = y.cols();
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    data[i * c + start..i * c + start + len]
                        .copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                vec![(*a, self.like(*a, data))]
            }
            Op::SliceRows(a, start) => {
                let c = self.value(*a).cols();
                let mut data = vec![0.0; self.value(*a).numel()];
                data[start * c..start * c + gd.len()].copy_from_slice(gd);
                vec![(*a, self.like(*a, data))]
            }
            Op::GatherRows(a, idx) => {
                let c = self.value(*a).cols();
                let mut data = vec![0.0; self.value(*a).numel()];
                for (o, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        data[src * c + j] += gd[o * c + j];
                    }
                }
                vec![(*a, self.like(*a, data))]
            }
            Op::MeanRows(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                let data = (0..r * c).map(|i| gd[i % c] / r as f64).collect();
                vec![(*a, self.like(*a, data))]
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                vec![(*a, self.like(*a, vec![gd[0]; n]))]
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                vec![(*a, self.like(*a, vec![gd[0] / n as f64; n]))]
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    let row = x.row(i);
                    let mu = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let yr = &y.data[i * c..(i + 1) * c];
                    let gr = &gd[i * c..(i + 1) * c];
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                    for j in 0..c {
                        data[i * c + j] = inv * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                vec![(*a, self.like(*a, data))]
            }
            Op::MaskedSoftmax(a) => {
                let (r, c) = (y.rows(), y.cols());
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data[i * c..(i + 1) * c];
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for j in 0..c {
                        data[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, self.like(*a, data))]
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let data = (0..x.numel())
                    .map(|i| gd[i / c] * (x.data[i] - y.data[i / c]).exp())
                    .collect();
                vec![(*a, self.like(*a, data))]
            }
            Op::CosineRows(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (r, c) = (av.rows(), av.cols());
                let mut ga = vec![0.0; r * c];
                let mut gb = vec![0.0; r * c];
                for i in 0..r {
                    let (ar, br) = (av.row(i), bv.row(i));
                    let (dot, na, nb) = cos_parts(ar, br);
                    let gi = gd[i];
                    if na * nb < COS_EPS {
                        for j in 0..c {
                            ga[i * c + j] = gi * br[j] / COS_EPS;
                            gb[i * c + j] = gi * ar[j] / COS_EPS;
                        }
                        continue;
                    }
                    let cs = dot / (na * nb);
                    for j in 0..c {
                        ga[i * c + j] = gi * (br[j] / (na * nb) - cs * ar[j] / (na * na));
                        gb[i * c + j] = gi * (ar[j] / (na * nb) - cs * br[j] / (nb * nb));
                    }
                }
                vec![(*a, self.like(*a, ga)), (*b, self.like(*b, gb))]
            }
            Op::L1(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| gd[0] * sign(x - y))
                    .collect();
                let gb = ga.iter().map(|x| -x).collect();
                vec![(*a, self.like(*a, ga)), (*b, self.like(*b, gb))]
            }
            Op::CrossEntropy(a, targets) => {
                let x = self.value(*a);
                let (n, v) = (x.rows(), x.cols());
                let count = targets.iter().flatten().count();
                let mut data = vec![0.0; n * v];
                if count > 0 {
                    let scale = gd[0] / count as f64;
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = x.row(i);
                        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        for j in 0..v {
                            let p = (row[j] - mx).exp() / z;
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            data[i * v + j] = scale * (p - onehot);
                        }
                    }
                }
                vec![(*a, self.like(*a, data))]
            }
            Op::GaussianKl(mu, lv) => {
                let (m, l) = (self.value(*mu), self.value(*lv));
                let gm = m.data().iter().map(|x| gd[0] * x).collect();
                let gl = l.data().iter().map(|x| gd[0] * 0.5 * (x.exp() - 1.0)).collect();
                vec![(*mu, self.like(*mu, gm)), (*lv, self.like(*lv, gl))]
            }
            Op::Reparam(mu, lv, noise) => {
                let (l, e) = (self.value(*lv), self.value(*noise));
                let sd: Vec<f64> = l.data().iter().map(|x| (0.5 * x).exp()).collect();
                let gl = gd
                    .iter()
                    .zip(&sd)
                    .zip(e.data())
                    .map(|((g, s), e)| g * 0.5 * s * e)
                    .collect();
                let ge = gd.iter().zip(&sd).map(|(g, s)| g * s).collect();
                vec![
                    (*mu, self.like(*mu, gd.to_vec())),
                    (*lv, self.like(*lv, gl)),
                    (*noise, self.like(*noise, ge)),
                ]
            }
            Op::Dropout(a, mask) => map1(*a, &|i, gi| gi * mask[i]),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let i = tape.constant(Tensor::eye(3));
        let out = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(out), tape.value(a));
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn masked_softmax_zeros_and_normalizes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 50.0, -3.0, 0.2, 0.1, 700.0]));
        let mask = [true, false, true, true, true, false];
        let p = tape.masked_softmax(a, &mask).unwrap();
        let v = tape.value(p);
        assert_eq!(v.get2(0, 1), 0.0);
        assert_eq!(v.get2(1, 2), 0.0);
        for i in 0..2 {
            assert!((v.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fully_masked_row_is_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.masked_softmax(a, &[true, false, false, false]).unwrap_err();
        assert!(matches!(err, Error::FullyMasked { row: 1 }));
    }

    #[test]
    fn cosine_self_is_one() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 3], &[0.3, -2.0, 5.0]));
        let c = tape.cosine_rows(a, a).unwrap();
        assert!((tape.value(c).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn reused_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.7]));
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn kl_stationary_at_standard_normal() {
        let mut tape = Tape::new();
        let mu = tape.leaf(Tensor::zeros(&[4]));
        let lv = tape.leaf(Tensor::zeros(&[4]));
        let kl = tape.gaussian_kl(mu, lv).unwrap();
        assert_eq!(tape.value(kl).item(), 0.0);
        let g = tape.backward(kl).unwrap();
        assert!(g.get(mu).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn untouched_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let unused = tape.leaf(Tensor::scalar(2.0));
        let g = tape.backward(x).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn cross_entropy_rejects_out_of_vocab() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 4]));
        let err = tape.cross_entropy(l, &[Some(1), Some(4)]).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { id: 4, vocab: 4 }));
    }

    #[test]
    fn zero_rate_dropout_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 2], 3.0));
        let mut rng = rand::thread_rng();
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn log_sigmoid_is_clamped() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1000.0, 1000.0]));
        let y = tape.log_sigmoid(x);
        let v = tape.value(y);
        assert!((v.data()[0] - log_sigmoid(-30.0)).abs() < 1e-12);
        assert!(v.data()[1] <= 0.0 && v.data()[1] > -1e-12);
    }
}

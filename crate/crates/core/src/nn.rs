//! Parameter storage and the layers shared by the encoders.

use std::ops::Index;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{GradientMap, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the store, matching [`Bound::gradients`] order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replace every tensor by name; shapes must match.
    pub fn load_from(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in named {
            let i = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if self.tensors[i].shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?} != {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }

    /// Put every parameter on the tape; tracked leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Wrap vars created in store order, e.g. the leaves of a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient per parameter in store order; zeros where the loss does not
    /// reach the parameter.
    pub fn gradients(&self, tape: &Tape, grads: &GradientMap) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
            })
            .collect()
    }
}

/// Scaled-normal initializer.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub store: &'a mut ParamStore,
}

impl Init<'_> {
    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let scale = 1.0 / (rows as f64).sqrt();
        let t = Tensor::randn(&[rows, cols], scale, self.rng);
        self.store.add(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], scale: f64) -> ParamId {
        let t = Tensor::randn(shape, scale, self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::full(shape, 1.0))
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: self.matrix(&format!("{name}.w"), d_in, d_out),
            b: self.zeros(&format!("{name}.b"), &[1, d_out]),
        }
    }

    pub fn layer_norm(&mut self, name: &str, d: usize, eps: f64) -> LayerNorm {
        LayerNorm {
            gamma: self.ones(&format!("{name}.gamma"), &[1, d]),
            beta: self.zeros(&format!("{name}.beta"), &[1, d]),
            eps,
        }
    }

    pub fn attention(&mut self, name: &str, d: usize, heads: usize) -> Result<Attention> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("model dim {d} not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.matrix(&format!("{name}.k.w"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
            heads,
        })
    }

    pub fn feed_forward(&mut self, name: &str, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            inner: self.linear(&format!("{name}.inner"), d, d_ff),
            outer: self.linear(&format!("{name}.outer"), d_ff, d),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        tape.add(y, p[self.b])
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, self.eps)?;
        let s = tape.mul(n, p[self.gamma])?;
        tape.add(s, p[self.beta])
    }
}

/// Multi-head scaled dot-product attention. Keys have no bias: it would add
/// the same amount to every score in a row.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: ParamId,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    /// Queries from `query` (`[n, d]`), keys/values from `context` (`[m, d]`).
    /// `mask` is `n x m` row-major; `None` means everything is visible.
    /// Returns the output and the per-head attention probabilities.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        query: Var,
        context: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let d = tape.shape(query)[1];
        let dh = d / self.heads;
        let q = self.q.forward(tape, p, query)?;
        let k = tape.matmul(context, p[self.k])?;
        let v = self.v.forward(tape, p, context)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale);
            let a = match mask {
                Some(m) => tape.masked_softmax(s, m)?,
                None => tape.softmax(s)?,
            };
            probs.push(a);
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        Ok((self.o.forward(tape, p, cat)?, probs))
    }
}

/// Two-layer ReLU feed-forward block.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.outer.forward(tape, p, h)
    }
}

/// Dropout configuration threaded through a forward pass.
pub struct Dropout {
    pub rate: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match (&mut self.rng, self.rate > 0.0) {
            (Some(rng), true) => tape.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (t, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in t.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Independent stream `stream` derived from one master seed.
pub fn sub_rng(master: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut r = ChaCha8Rng::seed_from_u64(master);
    r.set_stream(stream);
    r
}

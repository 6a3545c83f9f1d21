//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation in creation order, so the node list
//! is already a topological order and `backward` is one reverse sweep.
//! Trainable tensors bind to a single leaf per graph (keyed by
//! [`Tensor::id`]); gradients are read back with [`Graph::param_grad`].
//! A graph belongs to one thread. Parallel work uses one graph per worker.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Element type of a tape. Models train on `f32`; `f64` tapes run the same
/// op code for verification.
pub trait Scalar:
    Copy
    + PartialOrd
    + Default
    + Send
    + Sync
    + std::fmt::Debug
    + std::iter::Sum
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f32(self) -> f32;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NEG_INFINITY: Self = <$t>::NEG_INFINITY;
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f32(self) -> f32 {
                self as f32
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Gelu {
        x: Var,
    },
    /// `mask` holds 0 or 1/(1-rate) per element.
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Sum {
        x: Var,
    },
    MeanRows {
        x: Var,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    /// Max over the middle axis of `[groups, k, d]`.
    MaxGroups {
        x: Var,
        argmax: Vec<usize>,
    },
    GroupAttention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        scale: T,
        probs: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<T>,
    },
    Select {
        x: Var,
        index: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations. `Graph` is the `f32` tape used for
/// training; `Graph::<f64>::default()` gives a double-precision tape.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    bound: HashMap<u64, Var>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grads: Vec::new(),
        }
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl Graph<f32> {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }


    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().iter().map(|&v| T::from_f32(v)).collect(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf. A tensor with `requires_grad` is bound
    /// once per graph; repeated calls return the same node.
    pub fn input(&mut self, t: &Tensor) -> Var {
        if t.requires_grad {
            if let Some(&v) = self.bound.get(&t.id()) {
                return v;
            }
        }
        let v = self.push_leaf(t, t.requires_grad);
        if t.requires_grad {
            self.bound.insert(t.id(), v);
        }
        v
    }

    /// A constant leaf built from raw parts.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.push_leaf(&t, false))
    }

    /// A leaf that participates in differentiation without being bound to a
    /// tensor id.
    pub fn variable(&mut self, shape: Vec<usize>, value: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.push_leaf(&t, true))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn value_f32(&self, v: Var) -> Vec<f32> {
        self.value(v).iter().map(|x| x.to_f32()).collect()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's value out as a standalone `f32` tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), self.value_f32(v)).expect("node shapes are consistent")
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("{op}: expected a matrix, got shape {s:?}"))),
        }
    }

    /// `x[n×d_in] · w[d_in×d_out] + b[d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, din) = self.dims2(x, "linear")?;
        let (wr, dout) = self.dims2(w, "linear")?;
        if wr != din {
            return Err(shape_err("linear", self.shape(x), self.shape(w)));
        }
        if self.value(b).len() != dout {
            return Err(shape_err("linear", self.shape(w), self.shape(b)));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![T::ZERO; n * dout];
        for i in 0..n {
            let row = &mut out[i * dout..(i + 1) * dout];
            row.copy_from_slice(bv);
            for k in 0..din {
                let a = xv[i * din + k];
                if a == T::ZERO {
                    continue;
                }
                let wrow = &wv[k * dout..(k + 1) * dout];
                for (o, &wk) in row.iter_mut().zip(wrow) {
                    *o += a * wk;
                }
            }
        }
        Ok(self.push(vec![n, dout], out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Row-wise layer normalization with biased variance. A row whose
    /// variance plus `eps` is zero normalizes to zeros.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::Parameter(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let d = *self.shape(x).last().unwrap();
        if self.value(gamma).len() != d {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if self.value(beta).len() != d {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(beta)));
        }
        let eps = T::from_f32(eps);
        let inv_d = T::ONE / T::from_usize(d);
        let xv = self.value(x);
        let g = self.value(gamma);
        let bt = self.value(beta);
        let rows = xv.len() / d;
        let mut out = vec![T::ZERO; xv.len()];
        let mut xhat = vec![T::ZERO; xv.len()];
        let mut inv_std = vec![T::ZERO; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let denom = var + eps;
            let is = if denom > T::ZERO { T::ONE / denom.sqrt() } else { T::ZERO };
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::Parameter(format!("leaky_relu slope must lie in [0,1), got {slope}")));
        }
        let slope = T::from_f32(slope);
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v >= T::ZERO { v } else { slope * v })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LeakyRelu { x, slope }, &[x]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (a, c, half) = (T::from_f64(SQRT_2_OVER_PI), T::from_f64(GELU_C), T::from_f64(0.5));
        let out = self
            .value(x)
            .iter()
            .map(|&v| {
                let u = a * (v + c * v * v * v);
                half * v * (T::ONE + u.tanh())
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Gelu { x }, &[x])
    }

    /// Inverted dropout. Eval mode and a zero rate return `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f32, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate must lie in [0,1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f32(1.0 / (1.0 - rate));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f32>() < rate { T::ZERO } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x, mask }, &[x]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x, s }, &[x])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    /// Mean over the rows of `[n×d]`, shape `[1×d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "mean_rows")?;
        let xv = self.value(x);
        let mut out = vec![T::ZERO; d];
        for row in xv.chunks_exact(d) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        let inv = T::ONE / T::from_usize(n);
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(vec![1, d], out, Op::MeanRows { x }, &[x]))
    }

    /// Rows of `x[m×d]` picked by `idx`, shape `[idx.len()×d]`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (m, d) = self.dims2(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::Dimension("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Index { index: bad, len: m });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            out.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        Ok(self.push(vec![idx.len(), d], out, Op::GatherRows { x, idx }, &[x]))
    }

    /// `[n×da] ++ [n×db] -> [n×(da+db)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, da) = self.dims2(a, "concat_cols")?;
        let (nb, db) = self.dims2(b, "concat_cols")?;
        if na != nb {
            return Err(shape_err("concat_cols", self.shape(a), self.shape(b)));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(na * (da + db));
        for i in 0..na {
            out.extend_from_slice(&av[i * da..(i + 1) * da]);
            out.extend_from_slice(&bv[i * db..(i + 1) * db]);
        }
        Ok(self.push(vec![na, da + db], out, Op::ConcatCols { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape { x }, &[x]))
    }

    /// Column-wise maximum of `x[k×d]`, shape `[d]`, with the winning row per
    /// column. Ties go to the smallest row index.
    pub fn max_over_first_axis(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let (k, d) = match self.shape(x) {
            [k, d] => (*k, *d),
            s => {
                return Err(Error::Dimension(format!(
                    "max_over_first_axis: expected [k, d], got {s:?}"
                )))
            }
        };
        let grouped = self.reshape(x, vec![1, k, d])?;
        let out = self.max_over_groups(grouped)?;
        let argmax = match &self.nodes[out.0].op {
            Op::MaxGroups { argmax, .. } => argmax.iter().map(|&flat| flat / d).collect(),
            _ => unreachable!(),
        };
        let flat = self.reshape(out, vec![d])?;
        Ok((flat, argmax))
    }

    /// Max over the middle axis of `x[g×k×d]`, shape `[g×d]`.
    pub fn max_over_groups(&mut self, x: Var) -> Result<Var> {
        let (g, k, d) = match self.shape(x) {
            [g, k, d] => (*g, *k, *d),
            s => {
                return Err(Error::Dimension(format!(
                    "max_over_groups: expected [g, k, d], got {s:?}"
                )))
            }
        };
        let xv = self.value(x);
        let mut out = vec![T::ZERO; g * d];
        let mut argmax = vec![0usize; g * d];
        for gi in 0..g {
            let base = gi * k * d;
            for j in 0..d {
                let mut best = xv[base + j];
                let mut at = base + j;
                for r in 1..k {
                    let v = xv[base + r * d + j];
                    if v > best {
                        best = v;
                        at = base + r * d + j;
                    }
                }
                out[gi * d + j] = best;
                argmax[gi * d + j] = at;
            }
        }
        Ok(self.push(vec![g, d], out, Op::MaxGroups { x, argmax }, &[x]))
    }

    /// Scaled dot-product self-attention inside contiguous groups of `group`
    /// rows. `q`, `k`, `v` are `[n×d]` with `group | n` and `heads | d`.
    pub fn group_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.dims2(q, "group_attention")?;
        self.same_shape(q, k, "group_attention")?;
        self.same_shape(q, v, "group_attention")?;
        if group == 0 || n % group != 0 {
            return Err(Error::Config(format!(
                "group_attention: group size {group} does not divide {n} rows"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "group_attention: {heads} heads do not divide width {d}"
            )));
        }
        let dh = d / heads;
        let scale = T::ONE / T::from_usize(dh).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let t = group;
        let groups = n / t;
        let mut probs = vec![T::ZERO; groups * heads * t * t];
        let mut out = vec![T::ZERO; n * d];
        for gi in 0..groups {
            for h in 0..heads {
                let at = |row: usize| (gi * t + row) * d + h * dh;
                let p = &mut probs[(gi * heads + h) * t * t..(gi * heads + h + 1) * t * t];
                for i in 0..t {
                    let qi = &qv[at(i)..at(i) + dh];
                    let prow = &mut p[i * t..(i + 1) * t];
                    let mut mx = T::NEG_INFINITY;
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kv[at(j)..at(j) + dh];
                        let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        *pj = s;
                        mx = mx.max(s);
                    }
                    let mut z = T::ZERO;
                    for pj in prow.iter_mut() {
                        *pj = (*pj - mx).exp();
                        z += *pj;
                    }
                    let oi = &mut out[at(i)..at(i) + dh];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        *pj /= z;
                        let vj = &vv[at(j)..at(j) + dh];
                        for (o, &vjc) in oi.iter_mut().zip(vj) {
                            *o += *pj * vjc;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            vec![n, d],
            out,
            Op::GroupAttention {
                q,
                k,
                v,
                group,
                heads,
                scale,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities saved by a `group_attention` node, laid out
    /// `[groups, heads, t, t]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::GroupAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `−log softmax(logits)[target]`, computed with the max-shifted
    /// log-sum-exp. Shape `[1]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.len();
        if target >= c {
            return Err(Error::Index {
                index: target,
                len: c,
            });
        }
        let probs = softmax(lv);
        let mx = lv.iter().copied().fold(T::NEG_INFINITY, T::max);
        let lse = mx + lv.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        let loss = (lse - lv[target]).max(T::ZERO);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            },
            &[logits],
        ))
    }

    /// Element `index` of the flattened `x`, shape `[1]`.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let len = self.value(x).len();
        if index >= len {
            return Err(Error::Index { index, len });
        }
        let v = self.value(x)[index];
        Ok(self.push(vec![1], vec![v], Op::Select { x, index }, &[x]))
    }

    /// Reverse sweep from a scalar root. Gradients sum over fan-out and are
    /// available afterwards through [`Graph::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::ONE]);
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a bound tensor; zeros when it took no part in the root.
    pub fn param_grad(&self, t: &Tensor) -> Vec<T> {
        self.bound
            .get(&t.id())
            .and_then(|&v| self.grad(v))
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::ZERO; t.numel()])
    }

    fn backprop_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, din) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let dout = nodes[w.0].shape[1];
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                if wants(*x) {
                    let gx = grad_slot(grads, *x, n * din);
                    for i in 0..n {
                        let gy = &gout[i * dout..(i + 1) * dout];
                        for k in 0..din {
                            let wrow = &wv[k * dout..(k + 1) * dout];
                            gx[i * din + k] += gy.iter().zip(wrow).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                }
                if wants(*w) {
                    let gw = grad_slot(grads, *w, din * dout);
                    for i in 0..n {
                        let gy = &gout[i * dout..(i + 1) * dout];
                        for k in 0..din {
                            let a = xv[i * din + k];
                            if a == T::ZERO {
                                continue;
                            }
                            let grow = &mut gw[k * dout..(k + 1) * dout];
                            grow.iter_mut().zip(gy).for_each(|(g, &y)| *g += a * y);
                        }
                    }
                }
                if wants(*b) {
                    let gb = grad_slot(grads, *b, dout);
                    for row in gout.chunks_exact(dout) {
                        gb.iter_mut().zip(row).for_each(|(g, &y)| *g += y);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = nodes[gamma.0].value.len();
                let inv_d = T::ONE / T::from_usize(d);
                let gv = &nodes[gamma.0].value;
                if wants(*gamma) {
                    let gg = grad_slot(grads, *gamma, d);
                    for (row_g, row_h) in gout.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = grad_slot(grads, *beta, d);
                    for row_g in gout.chunks_exact(d) {
                        gb.iter_mut().zip(row_g).for_each(|(g, &y)| *g += y);
                    }
                }
                if wants(*x) {
                    let gx = grad_slot(grads, *x, gout.len());
                    let mut dh = vec![T::ZERO; d];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gy = &gout[r * d..(r + 1) * d];
                        let h = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = gy[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() * inv_d;
                        let mean_dh_h = dh.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for j in 0..d {
                            gx[r * d + j] += is * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = &nodes[x.0].value;
                let gx = grad_slot(grads, *x, xv.len());
                for ((g, &v), &y) in gx.iter_mut().zip(xv).zip(gout) {
                    *g += if v >= T::ZERO { y } else { *slope * y };
                }
            }
            Op::Gelu { x } => {
                let (a, c, half) = (T::from_f64(SQRT_2_OVER_PI), T::from_f64(GELU_C), T::from_f64(0.5));
                let three = T::from_f64(3.0);
                let xv = &nodes[x.0].value;
                let gx = grad_slot(grads, *x, xv.len());
                for ((g, &v), &y) in gx.iter_mut().zip(xv).zip(gout) {
                    let th = (a * (v + c * v * v * v)).tanh();
                    let du = a * (T::ONE + three * c * v * v);
                    *g += y * (half * (T::ONE + th) + half * v * (T::ONE - th * th) * du);
                }
            }
            Op::Dropout { x, mask } => {
                let gx = grad_slot(grads, *x, mask.len());
                for ((g, &m), &y) in gx.iter_mut().zip(mask).zip(gout) {
                    *g += m * y;
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        let g = grad_slot(grads, v, gout.len());
                        g.iter_mut().zip(gout).for_each(|(g, &y)| *g += y);
                    }
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    let g = grad_slot(grads, *a, gout.len());
                    g.iter_mut().zip(gout).for_each(|(g, &y)| *g += y);
                }
                if wants(*b) {
                    let g = grad_slot(grads, *b, gout.len());
                    g.iter_mut().zip(gout).for_each(|(g, &y)| *g -= y);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    let g = grad_slot(grads, *a, gout.len());
                    for ((g, &y), &o) in g.iter_mut().zip(gout).zip(bv) {
                        *g += y * o;
                    }
                }
                if wants(*b) {
                    let g = grad_slot(grads, *b, gout.len());
                    for ((g, &y), &o) in g.iter_mut().zip(gout).zip(av) {
                        *g += y * o;
                    }
                }
            }
            Op::Scale { x, s } => {
                let g = grad_slot(grads, *x, gout.len());
                g.iter_mut().zip(gout).for_each(|(g, &y)| *g += *s * y);
            }
            Op::Sum { x } => {
                let len = nodes[x.0].value.len();
                let g = grad_slot(grads, *x, len);
                g.iter_mut().for_each(|g| *g += gout[0]);
            }
            Op::MeanRows { x } => {
                let (n, d) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let inv = T::ONE / T::from_usize(n);
                let g = grad_slot(grads, *x, n * d);
                for row in g.chunks_exact_mut(d) {
                    row.iter_mut().zip(gout).for_each(|(g, &y)| *g += y * inv);
                }
            }
            Op::GatherRows { x, idx } => {
                let d = nodes[x.0].shape[1];
                let len = nodes[x.0].value.len();
                let g = grad_slot(grads, *x, len);
                for (r, &i) in idx.iter().enumerate() {
                    let src = &gout[r * d..(r + 1) * d];
                    g[i * d..(i + 1) * d].iter_mut().zip(src).for_each(|(g, &y)| *g += y);
                }
            }
            Op::ConcatCols { a, b } => {
                let (n, da) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let db = nodes[b.0].shape[1];
                if wants(*a) {
                    let g = grad_slot(grads, *a, n * da);
                    for i in 0..n {
                        let src = &gout[i * (da + db)..i * (da + db) + da];
                        g[i * da..(i + 1) * da].iter_mut().zip(src).for_each(|(g, &y)| *g += y);
                    }
                }
                if wants(*b) {
                    let g = grad_slot(grads, *b, n * db);
                    for i in 0..n {
                        let src = &gout[i * (da + db) + da..(i + 1) * (da + db)];
                        g[i * db..(i + 1) * db].iter_mut().zip(src).for_each(|(g, &y)| *g += y);
                    }
                }
            }
            Op::Reshape { x } => {
                let g = grad_slot(grads, *x, gout.len());
                g.iter_mut().zip(gout).for_each(|(g, &y)| *g += y);
            }
            Op::MaxGroups { x, argmax } => {
                let len = nodes[x.0].value.len();
                let g = grad_slot(grads, *x, len);
                for (&at, &y) in argmax.iter().zip(gout) {
                    g[at] += y;
                }
            }
            Op::GroupAttention {
                q,
                k,
                v,
                group,
                heads,
                scale,
                probs,
            } => {
                let (n, d) = (nodes[q.0].shape[0], nodes[q.0].shape[1]);
                let (t, heads, scale) = (*group, *heads, *scale);
                let dh = d / heads;
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let mut gq = vec![T::ZERO; n * d];
                let mut gk = vec![T::ZERO; n * d];
                let mut gv = vec![T::ZERO; n * d];
                let mut ds = vec![T::ZERO; t * t];
                for gi in 0..n / t {
                    for h in 0..heads {
                        let p = &probs[(gi * heads + h) * t * t..(gi * heads + h + 1) * t * t];
                        let at = |row: usize| (gi * t + row) * d + h * dh;
                        // dP = dO·Vᵀ, dS = P ⊙ (dP − rowsum(dP ⊙ P))
                        for i in 0..t {
                            let go = &gout[at(i)..at(i) + dh];
                            let mut dot = T::ZERO;
                            for j in 0..t {
                                let vj = &vv[at(j)..at(j) + dh];
                                let dp = go.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                                ds[i * t + j] = dp;
                                dot += dp * p[i * t + j];
                            }
                            for j in 0..t {
                                ds[i * t + j] = p[i * t + j] * (ds[i * t + j] - dot);
                            }
                        }
                        for i in 0..t {
                            for j in 0..t {
                                let pij = p[i * t + j];
                                let sij = ds[i * t + j] * scale;
                                for c in 0..dh {
                                    gv[at(j) + c] += pij * gout[at(i) + c];
                                    gq[at(i) + c] += sij * kv[at(j) + c];
                                    gk[at(j) + c] += sij * qv[at(i) + c];
                                }
                            }
                        }
                    }
                }
                for (var, g) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if wants(var) {
                        let slot = grad_slot(grads, var, n * d);
                        slot.iter_mut().zip(&g).for_each(|(s, &y)| *s += y);
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let g = grad_slot(grads, *logits, probs.len());
                for (c, (g, &p)) in g.iter_mut().zip(probs).enumerate() {
                    let onehot = if c == *target { T::ONE } else { T::ZERO };
                    *g += gout[0] * (p - onehot);
                }
            }
            Op::Select { x, index } => {
                let len = nodes[x.0].value.len();
                let g = grad_slot(grads, *x, len);
                g[*index] += gout[0];
            }
        }
    }
}

fn grad_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::ZERO; len])
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mx = logits.iter().copied().fold(T::NEG_INFINITY, T::max);
    let e: Vec<T> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: &[usize], v: &[f32]) -> Var {
        g.variable(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 2], &[1.0, 2.0]);
        let eye = leaf(&mut g, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let zero_b = leaf(&mut g, &[2], &[0.0, 0.0]);
        let y = g.linear(x, eye, zero_b).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0]);

        let zw = leaf(&mut g, &[2, 2], &[0.0; 4]);
        let b = leaf(&mut g, &[2], &[3.0, 4.0]);
        let y = g.linear(x, zw, b).unwrap();
        assert_eq!(g.value(y), &[3.0, 4.0]);

        let x2 = leaf(&mut g, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = leaf(&mut g, &[2, 1], &[1.0, 1.0]);
        let b = leaf(&mut g, &[1], &[1.0]);
        let y = g.linear(x2, w, b).unwrap();
        assert_eq!(g.shape(y), &[2, 1]);
        assert_eq!(g.value(y), &[4.0, 8.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 3], &[0.0; 3]);
        let w = leaf(&mut g, &[2, 2], &[0.0; 4]);
        let b = leaf(&mut g, &[2], &[0.0; 2]);
        let err = g.linear(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = leaf(&mut g, &[3], &[1.0; 3]);
        let zeros = leaf(&mut g, &[3], &[0.0; 3]);
        let x = leaf(&mut g, &[1, 3], &[5.0, 5.0, 5.0]);
        let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 0.0]);

        let ones2 = leaf(&mut g, &[2], &[1.0; 2]);
        let zeros2 = leaf(&mut g, &[2], &[0.0; 2]);
        let x = leaf(&mut g, &[1, 2], &[1.0, -1.0]);
        let y = g.layer_norm(x, ones2, zeros2, 1e-12).unwrap();
        assert!((g.value(y)[0] - 1.0).abs() < 1e-6 && (g.value(y)[1] + 1.0).abs() < 1e-6);

        let x = leaf(&mut g, &[1, 2], &[0.0, 2.0]);
        let y = g.layer_norm(x, ones2, zeros2, 0.0).unwrap();
        assert_eq!(g.value(y), &[-1.0, 1.0]);
    }

    #[test]
    fn leaky_relu_examples() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[2.0, 0.0, -5.0]);
        let y = g.leaky_relu(x, 0.2).unwrap();
        assert_eq!(g.value(y), &[2.0, 0.0, -1.0]);
        assert!(g.leaky_relu(x, 1.0).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.dropout(x, 0.5, false, 1).unwrap(), x);
        assert_eq!(g.dropout(x, 0.0, true, 1).unwrap(), x);
        assert!(matches!(g.dropout(x, 1.0, true, 1), Err(Error::Parameter(_))));
        assert!(matches!(g.dropout(x, -0.1, true, 1), Err(Error::Parameter(_))));
        let a = g.dropout(x, 0.5, true, 9).unwrap();
        let b = g.dropout(x, 0.5, true, 9).unwrap();
        assert_eq!(g.value(a), g.value(b));
        for (&o, &i) in g.value(a).iter().zip(&[1.0, 2.0, 3.0, 4.0]) {
            assert!(o == 0.0 || o == 2.0 * i);
        }
    }

    #[test]
    fn dropout_is_unbiased_over_seeds() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[10_000], &[1.0; 10_000]);
        let mut means = Vec::new();
        for seed in 0..8 {
            let y = g.dropout(x, 0.5, true, seed).unwrap();
            means.push(g.value(y).iter().sum::<f32>() / 10_000.0);
        }
        for m in &means {
            assert!((m - 1.0).abs() < 0.05, "mean {m}");
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let l = leaf(&mut g, &[2], &[0.0, 0.0]);
        let ce = g.softmax_cross_entropy(l, 0).unwrap();
        assert!((g.value(ce)[0] - std::f32::consts::LN_2).abs() < 1e-6);

        let l = leaf(&mut g, &[2], &[1000.0, 0.0]);
        let ce = g.softmax_cross_entropy(l, 0).unwrap();
        assert!(g.value(ce)[0].is_finite() && g.value(ce)[0] < 1e-6);

        let l = leaf(&mut g, &[3], &[1.0, 2.0, 3.0]);
        let ce = g.softmax_cross_entropy(l, 2).unwrap();
        // -ln(e^3 / (e + e^2 + e^3)) evaluated in f64
        let expect = -((3f64).exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((g.value(ce)[0] as f64 - expect).abs() < 1e-5);
        assert!((expect - 0.40761).abs() < 1e-5);

        assert!(matches!(g.softmax_cross_entropy(l, 3), Err(Error::Index { index: 3, len: 3 })));
    }

    #[test]
    fn max_over_first_axis_examples() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 2], &[1.0, 5.0, 3.0, 2.0]);
        let (m, arg) = g.max_over_first_axis(x).unwrap();
        assert_eq!(g.value(m), &[3.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);

        let x = leaf(&mut g, &[1, 2], &[7.0, 7.0]);
        let (m, arg) = g.max_over_first_axis(x).unwrap();
        assert_eq!(g.value(m), &[7.0, 7.0]);
        assert_eq!(arg, vec![0, 0]);

        let x = leaf(&mut g, &[2, 1], &[4.0, 4.0]);
        let (m, arg) = g.max_over_first_axis(x).unwrap();
        assert_eq!(g.value(m), &[4.0]);
        assert_eq!(arg, vec![0]);

        let x = leaf(&mut g, &[4], &[1.0; 4]);
        assert!(matches!(g.max_over_first_axis(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn max_backward_routes_to_argmax_only() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3, 2], &[1.0, 9.0, 4.0, 9.0, 4.0, 0.0]);
        let (m, _) = g.max_over_first_axis(x).unwrap();
        let w = g.constant(vec![2], vec![2.0, 3.0]).unwrap();
        let p = g.mul(m, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 3.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[0.5, -1.0, 2.0]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = leaf(&mut g, &[1], &[3.0]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);

        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn bound_tensor_maps_to_one_leaf() {
        let t = Tensor::full(&[2], 1.0).param();
        let mut g = Graph::new();
        let a = g.input(&t);
        let b = g.input(&t);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let s = g.sum(s);
        g.backward(s).unwrap();
        assert_eq!(g.param_grad(&t), vec![2.0, 2.0]);
        let unused = Tensor::zeros(&[3]).param();
        assert_eq!(g.param_grad(&unused), vec![0.0; 3]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut g = Graph::new();
        let vals: Vec<f32> = (0..24).map(|i| ((i * 7 % 11) as f32 - 5.0) / 4.0).collect();
        let q = leaf(&mut g, &[6, 4], &vals);
        let att = g.group_attention(q, q, q, 3, 2).unwrap();
        let p = g.attention_probs(att).unwrap();
        for row in p.chunks_exact(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        assert!(g.group_attention(q, q, q, 4, 1).is_err());
        assert!(g.group_attention(q, q, q, 3, 3).is_err());
    }
}

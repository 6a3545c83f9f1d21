//! Parameter containers shared by the backbone and the head.

use rand::Rng;

use crate::autograd::{Graph, Scalar, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Walks trainable tensors in a fixed order. `collect` and `collect_mut`
/// must visit the same tensors in the same order.
pub trait Parameterized {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>);

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.collect_mut(&mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, item) in self.iter().enumerate() {
            item.collect(&join(prefix, &i.to_string()), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for item in self.iter_mut() {
            item.collect_mut(out);
        }
    }
}

impl<T: Parameterized> Parameterized for Option<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        if let Some(item) = self {
            item.collect(prefix, out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        if let Some(item) = self {
            item.collect_mut(out);
        }
    }
}

/// Affine map `x·W + b` with `W` stored `[d_in×d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (d_in + d_out) as f32).sqrt();
        Linear {
            weight: Tensor::uniform(&[d_in, d_out], bound, rng).param(),
            bias: Tensor::zeros(&[d_out]).param(),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[d_in, d_out]).param(),
            bias: Tensor::zeros(&[d_out]).param(),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.input(&self.weight);
        let b = g.input(&self.bias);
        g.linear(x, w, b)
    }
}

impl Parameterized for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(&[d], 1.0).param(),
            beta: Tensor::zeros(&[d]).param(),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.input(&self.gamma);
        let beta = g.input(&self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

impl Parameterized for LayerNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

/// SplitMix64 finalizer, used to derive independent per-use seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Row indices of an `h×w` row-major grid visited block by block: blocks of
/// `s×s` cells in row-major block order, cells row-major inside each block.
pub fn block_order(h: usize, w: usize, s: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(h * w);
    for br in 0..h / s {
        for bc in 0..w / s {
            for r in 0..s {
                for c in 0..s {
                    out.push((br * s + r) * w + bc * s + c);
                }
            }
        }
    }
    out
}

/// Inverse of a permutation given as a list of source indices.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (dst, &src) in perm.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

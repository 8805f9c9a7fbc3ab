//! Transformer building blocks with hand-written reverse passes.
//!
//! Every layer exposes `forward`, returning its output together with a cache,
//! and `backward`, which consumes that cache, accumulates parameter gradients
//! into [`Param::grad`] and returns the gradient with respect to its input.
//! Everything runs in `f64` on a single sequence at a time (`positions × d`).

mod attention;
mod block;
mod ffn;
mod linear;
mod norm;
mod rope;
mod time;

pub use attention::{attention, AttentionCache, MultiHeadAttention};
pub use block::{BlockCache, BlockConfig, StackCache, TransformerBlock, TransformerStack};
pub use ffn::{SwiGlu, SwiGluCache};
pub use linear::Linear;
pub use norm::{LayerNorm, LayerNormCache};
pub use rope::{rope_rotate, RotaryEmbedding};
pub use time::{TimeEmbedding, TimeEmbeddingCache};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// A trainable tensor and its accumulated gradient. Vectors are stored as
/// `1 × n` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Param {
    pub fn new(value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::new(Array2::from_elem((rows, cols), v))
    }

    pub fn normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        Self::new(Array2::from_shape_fn((rows, cols), |_| {
            let n: f64 = StandardNormal.sample(rng);
            n * std
        }))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }
}

/// Named access to the parameters of a module tree.
pub trait Parameterized {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);

    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.collect_params_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn silu_vec(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(silu)
}

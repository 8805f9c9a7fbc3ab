use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{join, Linear, Param, Parameterized, RotaryEmbedding};
use crate::error::{Error, Result};

/// Scaled dot-product attention for one head. Masked keys receive exactly
/// zero weight; a query with no attendable key is an error. The weight
/// matrix is returned when `capture` is set.
pub fn attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    key_mask: &[bool],
    capture: bool,
) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    let (out, probs) = attend(q, k, v, key_mask)?;
    Ok((out, capture.then_some(probs)))
}

fn attend(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    key_mask: &[bool],
) -> Result<(Array2<f64>, Array2<f64>)> {
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() || key_mask.len() != k.nrows() {
        return Err(Error::Shape(format!(
            "attention q {:?}, k {:?}, v {:?}, mask {}",
            q.dim(),
            k.dim(),
            v.dim(),
            key_mask.len()
        )));
    }
    if !key_mask.iter().any(|&m| m) {
        return Err(Error::AllKeysMasked(0));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut probs = q.dot(&k.t());
    for mut row in probs.rows_mut() {
        let mut max = f64::NEG_INFINITY;
        for (j, &x) in row.iter().enumerate() {
            if key_mask[j] && x > max {
                max = x;
            }
        }
        let mut total = 0.0;
        for (j, x) in row.iter_mut().enumerate() {
            if key_mask[j] {
                *x = ((*x - max) * scale).exp();
                total += *x;
            } else {
                *x = 0.0;
            }
        }
        row.mapv_inplace(|x| x / total);
    }
    let out = probs.dot(&v);
    Ok((out, probs))
}

/// Multi-head self-attention with rotary positions and bias-free projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    heads: usize,
    rope: RotaryEmbedding,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    mixed: Array2<f64>,
    positions: Vec<usize>,
}

impl AttentionCache {
    /// Post-softmax weights, one `positions × positions` matrix per head.
    pub fn weights(&self) -> &[Array2<f64>] {
        &self.probs
    }
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rope_base: f64, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{dim} channels not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(dim, dim, false, rng),
            key: Linear::new(dim, dim, false, rng),
            value: Linear::new(dim, dim, false, rng),
            output: Linear::new(dim, dim, false, rng),
            heads,
            rope: RotaryEmbedding::new(dim / heads, rope_base)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn head_dim(&self) -> usize {
        self.rope.dim()
    }

    pub fn forward(&self, x: &Array2<f64>, key_mask: &[bool]) -> Result<(Array2<f64>, AttentionCache)> {
        let n = x.nrows();
        let dh = self.head_dim();
        let positions: Vec<usize> = (0..n).collect();
        let mut q = self.query.forward(x);
        let mut k = self.key.forward(x);
        let v = self.value.forward(x);
        let mut mixed = Array2::zeros((n, x.ncols()));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            self.rope.rotate_in_place(q.slice_mut(cols), &positions, false);
            self.rope.rotate_in_place(k.slice_mut(cols), &positions, false);
            let (o, p) = attend(q.slice(cols), k.slice(cols), v.slice(cols), key_mask)?;
            mixed.slice_mut(cols).assign(&o);
            probs.push(p);
        }
        let y = self.output.forward(&mixed);
        Ok((
            y,
            AttentionCache {
                input: x.clone(),
                q,
                k,
                v,
                probs,
                mixed,
                positions,
            },
        ))
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Array2<f64>) -> Array2<f64> {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let dmixed = self.output.backward(&cache.mixed, dy);
        let shape = cache.q.raw_dim();
        let mut dq = Array2::zeros(shape.clone());
        let mut dk = Array2::zeros(shape.clone());
        let mut dv = Array2::zeros(shape);
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let d_out = dmixed.slice(cols);
            let dp = d_out.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_out));
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let mut ds = dp - &row_dot.insert_axis(Axis(1));
            ds *= p;
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
            self.rope.rotate_in_place(dq.slice_mut(cols), &cache.positions, true);
            self.rope.rotate_in_place(dk.slice_mut(cols), &cache.positions, true);
        }
        let mut dx = self.query.backward(&cache.input, &dq);
        dx += &self.key.backward(&cache.input, &dk);
        dx += &self.value.backward(&cache.input, &dv);
        dx
    }
}

impl Parameterized for MultiHeadAttention {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.query.collect_params(&join(prefix, "query"), out);
        self.key.collect_params(&join(prefix, "key"), out);
        self.value.collect_params(&join(prefix, "value"), out);
        self.output.collect_params(&join(prefix, "output"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.query.collect_params_mut(&join(prefix, "query"), out);
        self.key.collect_params_mut(&join(prefix, "key"), out);
        self.value.collect_params_mut(&join(prefix, "value"), out);
        self.output.collect_params_mut(&join(prefix, "output"), out);
    }
}

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use super::rope::DEFAULT_ROPE_BASE;
use super::{
    join, silu_grad, silu_vec, AttentionCache, LayerNorm, LayerNormCache, Linear,
    MultiHeadAttention, Param, Parameterized, SwiGlu, SwiGluCache,
};
use crate::error::{Error, Result};

/// Shape of a transformer tower.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub layers: usize,
    /// adaLN-zero time conditioning.
    pub conditioned: bool,
    /// Overrides the default SwiGLU hidden width when set.
    pub ffn_hidden: Option<usize>,
    pub rope_base: f64,
}

impl BlockConfig {
    pub fn new(channels: usize, heads: usize, layers: usize, conditioned: bool) -> Self {
        Self {
            channels,
            heads,
            layers,
            conditioned,
            ffn_hidden: None,
            rope_base: DEFAULT_ROPE_BASE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::Config("channels, heads and layers must be positive".into()));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} channels not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if (self.channels / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary embeddings",
                self.channels / self.heads
            )));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::Config(format!("rope base {} must exceed 1", self.rope_base)));
        }
        if self.ffn_hidden == Some(0) {
            return Err(Error::Config("ffn hidden width must be positive".into()));
        }
        Ok(())
    }

    /// SwiGLU hidden width: `8d/3` rounded to the nearest multiple of the
    /// head count.
    pub fn hidden_width(&self) -> usize {
        if let Some(h) = self.ffn_hidden {
            return h;
        }
        let raw = 8.0 * self.channels as f64 / 3.0;
        let units = (raw / self.heads as f64).round().max(1.0) as usize;
        units * self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Pre-LN transformer block. When conditioned, the norms lose their affine
/// parameters and are modulated by shift/scale/gate vectors computed from the
/// condition; the modulation projection starts at zero so the block is the
/// identity at initialization.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: SwiGlu,
    pub modulation: Option<Linear>,
    dim: usize,
}

#[derive(Debug, Clone)]
struct Modulation {
    cond: Array2<f64>,
    cond_act: Array2<f64>,
    values: Array1<f64>,
}

impl Modulation {
    fn chunk(&self, i: usize, d: usize) -> ArrayView1<'_, f64> {
        self.values.slice(s![i * d..(i + 1) * d])
    }
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    norm1: LayerNormCache,
    attn: AttentionCache,
    attn_out: Array2<f64>,
    norm2: LayerNormCache,
    ffn: SwiGluCache,
    ffn_out: Array2<f64>,
    modulation: Option<Modulation>,
}

impl BlockCache {
    pub fn attention_weights(&self) -> &[Array2<f64>] {
        self.attn.weights()
    }
}

const SHIFT_ATTN: usize = 0;
const SCALE_ATTN: usize = 1;
const GATE_ATTN: usize = 2;
const SHIFT_FFN: usize = 3;
const SCALE_FFN: usize = 4;
const GATE_FFN: usize = 5;

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(config: &BlockConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.channels;
        let (norm1, norm2, modulation) = if config.conditioned {
            (LayerNorm::plain(), LayerNorm::plain(), Some(Linear::zeros(d, 6 * d, true)))
        } else {
            (LayerNorm::affine(d), LayerNorm::affine(d), None)
        };
        Ok(Self {
            norm1,
            attn: MultiHeadAttention::new(d, config.heads, config.rope_base, rng)?,
            norm2,
            ffn: SwiGlu::new(d, config.hidden_width(), rng),
            modulation,
            dim: d,
        })
    }

    pub fn is_conditioned(&self) -> bool {
        self.modulation.is_some()
    }

    pub fn forward(
        &self,
        x: &Array2<f64>,
        key_mask: &[bool],
        condition: Option<ArrayView1<f64>>,
    ) -> Result<(Array2<f64>, BlockCache)> {
        let d = self.dim;
        if x.ncols() != d {
            return Err(Error::Shape(format!("block expects {d} channels, got {}", x.ncols())));
        }
        let modulation = match (&self.modulation, condition) {
            (Some(proj), Some(c)) => {
                if c.len() != d {
                    return Err(Error::Shape(format!("condition length {} != {d}", c.len())));
                }
                let cond = c.to_owned().insert_axis(Axis(0));
                let cond_act = silu_vec(&c.to_owned()).insert_axis(Axis(0));
                let values = proj.forward(&cond_act).row(0).to_owned();
                Some(Modulation {
                    cond,
                    cond_act,
                    values,
                })
            }
            (None, None) => None,
            (Some(_), None) => {
                return Err(Error::Config("conditioned block called without a condition".into()))
            }
            (None, Some(_)) => {
                return Err(Error::Config("condition supplied to an unconditioned block".into()))
            }
        };

        let (mut u1, norm1) = self.norm1.forward(x);
        if let Some(m) = &modulation {
            u1 *= &m.chunk(SCALE_ATTN, d).mapv(|v| 1.0 + v);
            u1 += &m.chunk(SHIFT_ATTN, d);
        }
        let (attn_out, attn) = self.attn.forward(&u1, key_mask)?;
        let mut h = x.clone();
        match &modulation {
            Some(m) => h += &(&attn_out * &m.chunk(GATE_ATTN, d)),
            None => h += &attn_out,
        }

        let (mut u2, norm2) = self.norm2.forward(&h);
        if let Some(m) = &modulation {
            u2 *= &m.chunk(SCALE_FFN, d).mapv(|v| 1.0 + v);
            u2 += &m.chunk(SHIFT_FFN, d);
        }
        let (ffn_out, ffn) = self.ffn.forward(&u2);
        let mut y = h;
        match &modulation {
            Some(m) => y += &(&ffn_out * &m.chunk(GATE_FFN, d)),
            None => y += &ffn_out,
        }
        Ok((
            y,
            BlockCache {
                norm1,
                attn,
                attn_out,
                norm2,
                ffn,
                ffn_out,
                modulation,
            },
        ))
    }

    /// Returns the input gradient and, for conditioned blocks, the gradient
    /// with respect to the condition vector.
    pub fn backward(&mut self, cache: &BlockCache, dy: &Array2<f64>) -> (Array2<f64>, Option<Array1<f64>>) {
        let d = self.dim;
        let m = cache.modulation.as_ref();
        let mut dmod = Array1::<f64>::zeros(6 * d);

        // feed-forward branch
        let dffn_out = match m {
            Some(m) => {
                dmod.slice_mut(s![GATE_FFN * d..(GATE_FFN + 1) * d])
                    .assign(&(dy * &cache.ffn_out).sum_axis(Axis(0)));
                dy * &m.chunk(GATE_FFN, d)
            }
            None => dy.clone(),
        };
        let du2 = self.ffn.backward(&cache.ffn, &dffn_out);
        let dn2 = match m {
            Some(m) => {
                let n2 = cache.norm2.normalized();
                dmod.slice_mut(s![SCALE_FFN * d..(SCALE_FFN + 1) * d])
                    .assign(&(&du2 * n2).sum_axis(Axis(0)));
                dmod.slice_mut(s![SHIFT_FFN * d..(SHIFT_FFN + 1) * d])
                    .assign(&du2.sum_axis(Axis(0)));
                &du2 * &m.chunk(SCALE_FFN, d).mapv(|v| 1.0 + v)
            }
            None => du2,
        };
        let mut dh = dy.clone();
        dh += &self.norm2.backward(&cache.norm2, &dn2);

        // attention branch
        let dattn_out = match m {
            Some(m) => {
                dmod.slice_mut(s![GATE_ATTN * d..(GATE_ATTN + 1) * d])
                    .assign(&(&dh * &cache.attn_out).sum_axis(Axis(0)));
                &dh * &m.chunk(GATE_ATTN, d)
            }
            None => dh.clone(),
        };
        let du1 = self.attn.backward(&cache.attn, &dattn_out);
        let dn1 = match m {
            Some(m) => {
                let n1 = cache.norm1.normalized();
                dmod.slice_mut(s![SCALE_ATTN * d..(SCALE_ATTN + 1) * d])
                    .assign(&(&du1 * n1).sum_axis(Axis(0)));
                dmod.slice_mut(s![SHIFT_ATTN * d..(SHIFT_ATTN + 1) * d])
                    .assign(&du1.sum_axis(Axis(0)));
                &du1 * &m.chunk(SCALE_ATTN, d).mapv(|v| 1.0 + v)
            }
            None => du1,
        };
        let mut dx = dh;
        dx += &self.norm1.backward(&cache.norm1, &dn1);

        let dcond = match (m, &mut self.modulation) {
            (Some(m), Some(proj)) => {
                let dact = proj.backward(&m.cond_act, &dmod.insert_axis(Axis(0)));
                let dc = &dact.row(0) * &m.cond.row(0).mapv(silu_grad);
                Some(dc)
            }
            _ => None,
        };
        (dx, dcond)
    }
}

impl Parameterized for TransformerBlock {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.norm1.collect_params(&join(prefix, "norm1"), out);
        self.attn.collect_params(&join(prefix, "attn"), out);
        self.norm2.collect_params(&join(prefix, "norm2"), out);
        self.ffn.collect_params(&join(prefix, "ffn"), out);
        if let Some(m) = &self.modulation {
            m.collect_params(&join(prefix, "modulation"), out);
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.norm1.collect_params_mut(&join(prefix, "norm1"), out);
        self.attn.collect_params_mut(&join(prefix, "attn"), out);
        self.norm2.collect_params_mut(&join(prefix, "norm2"), out);
        self.ffn.collect_params_mut(&join(prefix, "ffn"), out);
        if let Some(m) = &mut self.modulation {
            m.collect_params_mut(&join(prefix, "modulation"), out);
        }
    }
}

/// `layers` blocks followed by an affine layer norm.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
    config: BlockConfig,
}

#[derive(Debug, Clone)]
pub struct StackCache {
    blocks: Vec<BlockCache>,
    norm: Option<LayerNormCache>,
}

impl StackCache {
    pub fn blocks(&self) -> &[BlockCache] {
        &self.blocks
    }
}

impl TransformerStack {
    pub fn new<R: Rng + ?Sized>(config: &BlockConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.layers)
            .map(|_| TransformerBlock::new(config, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            final_norm: LayerNorm::affine(config.channels),
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &BlockConfig {
        &self.config
    }

    /// Blocks only, without the final norm.
    pub fn forward_trunk(
        &self,
        x: &Array2<f64>,
        key_mask: &[bool],
        condition: Option<ArrayView1<f64>>,
    ) -> Result<(Array2<f64>, StackCache)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&h, key_mask, condition)?;
            caches.push(cache);
            h = next;
        }
        Ok((
            h,
            StackCache {
                blocks: caches,
                norm: None,
            },
        ))
    }

    pub fn forward(
        &self,
        x: &Array2<f64>,
        key_mask: &[bool],
        condition: Option<ArrayView1<f64>>,
    ) -> Result<(Array2<f64>, StackCache)> {
        let (h, mut cache) = self.forward_trunk(x, key_mask, condition)?;
        let (y, norm) = self.final_norm.forward(&h);
        cache.norm = Some(norm);
        Ok((y, cache))
    }

    pub fn backward(&mut self, cache: &StackCache, dy: &Array2<f64>) -> (Array2<f64>, Option<Array1<f64>>) {
        let mut dh = match &cache.norm {
            Some(norm) => self.final_norm.backward(norm, dy),
            None => dy.clone(),
        };
        let mut dcond: Option<Array1<f64>> = None;
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            let (dx, dc) = block.backward(bc, &dh);
            dh = dx;
            if let Some(dc) = dc {
                dcond = Some(match dcond {
                    Some(acc) => acc + dc,
                    None => dc,
                });
            }
        }
        (dh, dcond)
    }
}

impl Parameterized for TransformerStack {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.final_norm.collect_params(&join(prefix, "final_norm"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_params_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.final_norm.collect_params_mut(&join(prefix, "final_norm"), out);
    }
}

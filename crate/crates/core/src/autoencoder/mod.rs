//! Sequence autoencoder: token encoder, latent decoder and the three training
//! regimes (token norm, noise masking, masked language modelling).

mod losses;
mod masking;
mod regime;

pub use losses::{
    kl_multivariate_rows, kl_norm_multivariate, kl_norm_univariate, kl_norm_with_grad,
    kl_univariate_rows, moments, moments_of_rows, reconstruction_loss, token_norm_loss,
    MomentSummary, NormForm, COVARIANCE_RIDGE, VARIANCE_FLOOR,
};
pub use masking::{mlm_mask, noise_mask, position_cross_entropy};
pub use regime::{regime_loss, Regime, RegimeConfig, RegimeLoss};

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, BlockConfig, Linear, Param, Parameterized, StackCache, TransformerStack};
use crate::seqdata::{TokenBatch, NUM_AMINO_ACIDS, VOCAB_SIZE};

/// Per-residue latent vectors in the padded batch layout. Edge and padding
/// rows hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub z: Array3<f64>,
    pub residue_mask: Array2<bool>,
    pub lengths: Vec<usize>,
}

impl LatentBatch {
    pub fn dim(&self) -> usize {
        self.z.dim().2
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// Residue rows of sequence `b` (`len × d`).
    pub fn residues(&self, b: usize) -> ArrayView2<'_, f64> {
        self.z.slice(s![b, 1..=self.lengths[b], ..])
    }

    /// Assemble from per-sequence residue rows.
    pub fn from_residues(rows: &[Array2<f64>], padded_len: usize, d: usize) -> Result<Self> {
        let mut z = Array3::zeros((rows.len(), padded_len, d));
        let mut residue_mask = Array2::from_elem((rows.len(), padded_len), false);
        let mut lengths = Vec::with_capacity(rows.len());
        for (b, r) in rows.iter().enumerate() {
            let len = r.nrows();
            if r.ncols() != d || len + 2 > padded_len {
                return Err(Error::Shape(format!(
                    "residue block {:?} does not fit ({padded_len}, {d})",
                    r.dim()
                )));
            }
            z.slice_mut(s![b, 1..=len, ..]).assign(r);
            residue_mask.slice_mut(s![b, 1..=len]).fill(true);
            lengths.push(len);
        }
        Ok(Self {
            z,
            residue_mask,
            lengths,
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.z.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("latent batch".into()))
        }
    }
}

/// Token embedding followed by an unconditioned transformer stack.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub embedding: Param,
    pub stack: TransformerStack,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    tokens: Vec<u8>,
    stack: StackCache,
}

impl EncoderCache {
    pub fn stack(&self) -> &StackCache {
        &self.stack
    }
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: &BlockConfig, rng: &mut R) -> Result<Self> {
        if config.conditioned {
            return Err(Error::Config("encoder stack must be unconditioned".into()));
        }
        Ok(Self {
            embedding: Param::normal(VOCAB_SIZE, config.channels, 1.0, rng),
            stack: TransformerStack::new(config, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.embedding.value.ncols()
    }

    /// Encode one `[BOS, residues.., EOS]` window; returns all window rows.
    pub fn forward_window(&self, window: &[u8]) -> Result<(Array2<f64>, EncoderCache)> {
        let d = self.dim();
        let mut x = Array2::zeros((window.len(), d));
        for (i, &t) in window.iter().enumerate() {
            if t as usize >= VOCAB_SIZE {
                return Err(Error::Shape(format!("token id {t} outside vocabulary")));
            }
            x.row_mut(i).assign(&self.embedding.value.row(t as usize));
        }
        let mask = vec![true; window.len()];
        let (y, stack) = self.stack.forward(&x, &mask, None)?;
        Ok((
            y,
            EncoderCache {
                tokens: window.to_vec(),
                stack,
            },
        ))
    }

    pub fn encode(&self, batch: &TokenBatch) -> Result<LatentBatch> {
        self.encode_with_cache(batch).map(|(l, _)| l)
    }

    pub fn encode_with_cache(&self, batch: &TokenBatch) -> Result<(LatentBatch, Vec<EncoderCache>)> {
        let d = self.dim();
        let mut z = Array3::zeros((batch.batch_size(), batch.padded_len, d));
        let mut caches = Vec::with_capacity(batch.batch_size());
        for b in 0..batch.batch_size() {
            let len = batch.lengths[b];
            let (y, cache) = self.forward_window(&batch.window(b))?;
            z.slice_mut(s![b, 1..=len, ..]).assign(&y.slice(s![1..=len, ..]));
            caches.push(cache);
        }
        let latents = LatentBatch {
            z,
            residue_mask: batch.mask.clone(),
            lengths: batch.lengths.clone(),
        };
        latents.check_finite()?;
        Ok((latents, caches))
    }

    pub fn backward_window(&mut self, cache: &EncoderCache, dy: &Array2<f64>) {
        let (dx, _) = self.stack.backward(&cache.stack, dy);
        for (i, &t) in cache.tokens.iter().enumerate() {
            let mut row = self.embedding.grad.row_mut(t as usize);
            row += &dx.row(i);
        }
    }
}

impl Parameterized for Encoder {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "embedding"), &self.embedding));
        self.stack.collect_params(&join(prefix, "stack"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "embedding"), &mut self.embedding));
        self.stack.collect_params_mut(&join(prefix, "stack"), out);
    }
}

/// Transformer part of the decoder with its internal edge embeddings.
#[derive(Debug, Clone)]
pub struct DecoderTrunk {
    pub bos: Param,
    pub eos: Param,
    pub stack: TransformerStack,
}

/// Maps residue latents to amino-acid logits. With `trunk = None` the decoder
/// is a single affine projection.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub trunk: Option<DecoderTrunk>,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    head_input: Array2<f64>,
    stack: Option<StackCache>,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(config: &BlockConfig, trivial: bool, rng: &mut R) -> Result<Self> {
        let d = config.channels;
        let trunk = if trivial {
            None
        } else {
            if config.conditioned {
                return Err(Error::Config("decoder stack must be unconditioned".into()));
            }
            Some(DecoderTrunk {
                bos: Param::normal(1, d, 1.0, rng),
                eos: Param::normal(1, d, 1.0, rng),
                stack: TransformerStack::new(config, rng)?,
            })
        };
        Ok(Self {
            trunk,
            head: Linear::new(d, NUM_AMINO_ACIDS, true, rng),
        })
    }

    pub fn is_trivial(&self) -> bool {
        self.trunk.is_none()
    }

    pub fn dim(&self) -> usize {
        self.head.in_features()
    }

    /// Logits (`len × 20`) for one sequence's residue latents.
    pub fn forward_residues(&self, latents: ArrayView2<f64>) -> Result<(Array2<f64>, DecoderCache)> {
        if latents.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "decoder expects {} channels, got {}",
                self.dim(),
                latents.ncols()
            )));
        }
        let len = latents.nrows();
        let (head_input, stack) = match &self.trunk {
            None => (latents.to_owned(), None),
            Some(trunk) => {
                let d = self.dim();
                let mut window = Array2::zeros((len + 2, d));
                window.row_mut(0).assign(&trunk.bos.value.row(0));
                window.slice_mut(s![1..=len, ..]).assign(&latents);
                window.row_mut(len + 1).assign(&trunk.eos.value.row(0));
                let (y, cache) = trunk.stack.forward(&window, &vec![true; len + 2], None)?;
                (y.slice(s![1..=len, ..]).to_owned(), Some(cache))
            }
        };
        let logits = self.head.forward(&head_input);
        Ok((logits, DecoderCache { head_input, stack }))
    }

    /// Gradient with respect to the residue latents.
    pub fn backward_residues(&mut self, cache: &DecoderCache, dlogits: &Array2<f64>) -> Array2<f64> {
        let dhead = self.head.backward(&cache.head_input, dlogits);
        match (&mut self.trunk, &cache.stack) {
            (Some(trunk), Some(stack_cache)) => {
                let len = dhead.nrows();
                let mut dwindow = Array2::zeros((len + 2, dhead.ncols()));
                dwindow.slice_mut(s![1..=len, ..]).assign(&dhead);
                let (dx, _) = trunk.stack.backward(stack_cache, &dwindow);
                {
                    let mut g = trunk.bos.grad.row_mut(0);
                    g += &dx.row(0);
                }
                {
                    let mut g = trunk.eos.grad.row_mut(0);
                    g += &dx.row(len + 1);
                }
                dx.slice(s![1..=len, ..]).to_owned()
            }
            _ => dhead,
        }
    }
}

impl Parameterized for Decoder {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        if let Some(t) = &self.trunk {
            out.push((join(prefix, "bos"), &t.bos));
            out.push((join(prefix, "eos"), &t.eos));
            t.stack.collect_params(&join(prefix, "stack"), out);
        }
        self.head.collect_params(&join(prefix, "head"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        if let Some(t) = &mut self.trunk {
            out.push((join(prefix, "bos"), &mut t.bos));
            out.push((join(prefix, "eos"), &mut t.eos));
            t.stack.collect_params_mut(&join(prefix, "stack"), out);
        }
        self.head.collect_params_mut(&join(prefix, "head"), out);
    }
}

/// Encoder/decoder pair.
#[derive(Debug, Clone)]
pub struct AutoencoderModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl AutoencoderModel {
    pub fn new<R: Rng + ?Sized>(config: &BlockConfig, trivial_decoder: bool, rng: &mut R) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(config, rng)?,
            decoder: Decoder::new(config, trivial_decoder, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    /// Deterministic map from tokens to residue latents.
    pub fn encode(&self, batch: &TokenBatch) -> Result<LatentBatch> {
        self.encode_with_cache(batch).map(|(l, _)| l)
    }

    pub fn encode_with_cache(&self, batch: &TokenBatch) -> Result<(LatentBatch, Vec<EncoderCache>)> {
        self.encoder.encode_with_cache(batch)
    }

    /// Logits in the padded layout; only residue rows are populated.
    pub fn decode(&self, latents: &LatentBatch) -> Result<Array3<f64>> {
        self.decode_with_cache(latents).map(|(l, _)| l)
    }

    pub fn decode_with_cache(&self, latents: &LatentBatch) -> Result<(Array3<f64>, Vec<DecoderCache>)> {
        if latents.dim() != self.decoder.dim() {
            return Err(Error::Shape(format!(
                "latent dimension {} != decoder dimension {}",
                latents.dim(),
                self.decoder.dim()
            )));
        }
        let (bsz, padded, _) = latents.z.dim();
        let mut logits = Array3::zeros((bsz, padded, NUM_AMINO_ACIDS));
        let mut caches = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let len = latents.lengths[b];
            let (l, cache) = self.decoder.forward_residues(latents.residues(b))?;
            logits.slice_mut(s![b, 1..=len, ..]).assign(&l);
            caches.push(cache);
        }
        Ok((logits, caches))
    }

    /// Backpropagate residue-latent gradients (padded layout) into the encoder.
    pub(crate) fn backward_encoder(&mut self, caches: &[EncoderCache], dz: &Array3<f64>, lengths: &[usize]) {
        for (b, cache) in caches.iter().enumerate() {
            let len = lengths[b];
            let mut dwindow = Array2::zeros((len + 2, self.dim()));
            dwindow
                .slice_mut(s![1..=len, ..])
                .assign(&dz.slice(s![b, 1..=len, ..]));
            self.encoder.backward_window(cache, &dwindow);
        }
    }

    /// Backpropagate logit gradients into the decoder; returns latent
    /// gradients in the padded layout.
    pub(crate) fn backward_decoder(
        &mut self,
        caches: &[DecoderCache],
        dlogits: &Array3<f64>,
        lengths: &[usize],
    ) -> Array3<f64> {
        let (bsz, padded, _) = dlogits.dim();
        let mut dz = Array3::zeros((bsz, padded, self.dim()));
        for (b, cache) in caches.iter().enumerate() {
            let len = lengths[b];
            let dl = dlogits.slice(s![b, 1..=len, ..]).to_owned();
            let dlat = self.decoder.backward_residues(cache, &dl);
            dz.slice_mut(s![b, 1..=len, ..]).assign(&dlat);
        }
        dz
    }
}

impl Parameterized for AutoencoderModel {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.encoder.collect_params(&join(prefix, "encoder"), out);
        self.decoder.collect_params(&join(prefix, "decoder"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.encoder.collect_params_mut(&join(prefix, "encoder"), out);
        self.decoder.collect_params_mut(&join(prefix, "decoder"), out);
    }
}

#[cfg(test)]
mod tests;

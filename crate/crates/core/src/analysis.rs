//! Attention-map statistics and per-residue embedding export.
//!
//! For each layer, post-softmax attention weights are averaged over heads,
//! sequences and residue query positions. Key mass on the query's own
//! position is `local`, mass on BOS/EOS is `edge`, and mass on every other
//! residue is `context`.

use std::io::Write;

use ndarray::Array2;

use crate::diffusion::{schedule, DiffusionModel};
use crate::error::{Error, Result};
use crate::probe::{Backbone, Representation};
use crate::seqdata::{TokenBatch, TokenSequence, Vocabulary, pad_batch_to};
use crate::autoencoder::Encoder;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionFractions {
    pub layer: usize,
    pub context: f64,
    pub local: f64,
    pub edge: f64,
}

impl AttentionFractions {
    pub fn total(&self) -> f64 {
        self.context + self.local + self.edge
    }
}

/// Running sums of attention mass per layer.
#[derive(Debug, Clone, Default)]
pub struct FractionAccumulator {
    sums: Vec<[f64; 3]>,
    queries: Vec<f64>,
}

impl FractionAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one sequence's per-head maps for `layer`. Each map is over the
    /// `[BOS, residues.., EOS]` window of `len` residues.
    pub fn add(&mut self, layer: usize, heads: &[Array2<f64>], len: usize) -> Result<()> {
        if self.sums.len() <= layer {
            self.sums.resize(layer + 1, [0.0; 3]);
            self.queries.resize(layer + 1, 0.0);
        }
        let n = len + 2;
        for w in heads {
            if w.dim() != (n, n) {
                return Err(Error::Shape(format!("attention map {:?} for window of {n}", w.dim())));
            }
            for q in 1..=len {
                let row = w.row(q);
                let local = row[q];
                let edge = row[0] + row[n - 1];
                let context: f64 = (1..=len).filter(|&k| k != q).map(|k| row[k]).sum();
                let s = &mut self.sums[layer];
                s[0] += context;
                s[1] += local;
                s[2] += edge;
            }
            self.queries[layer] += len as f64;
        }
        Ok(())
    }

    pub fn finish(&self) -> Vec<AttentionFractions> {
        self.sums
            .iter()
            .zip(&self.queries)
            .enumerate()
            .map(|(layer, (s, &q))| AttentionFractions {
                layer,
                context: s[0] / q,
                local: s[1] / q,
                edge: s[2] / q,
            })
            .collect()
    }
}

pub fn encoder_attention(encoder: &Encoder, batch: &TokenBatch) -> Result<Vec<AttentionFractions>> {
    let mut acc = FractionAccumulator::new();
    for b in 0..batch.batch_size() {
        let (_, cache) = encoder.forward_window(&batch.window(b))?;
        for (layer, block) in cache.stack().blocks().iter().enumerate() {
            acc.add(layer, block.attention_weights(), batch.lengths[b])?;
        }
    }
    Ok(acc.finish())
}

/// Diffusion-tower attention when fed `cos(πt/2) z` at time `t`.
pub fn diffusion_attention(
    encoder: &Encoder,
    diffusion: &DiffusionModel,
    batch: &TokenBatch,
    t: f64,
) -> Result<Vec<AttentionFractions>> {
    let state = schedule(t)?;
    let z = encoder.encode(batch)?;
    let mut acc = FractionAccumulator::new();
    for b in 0..batch.batch_size() {
        let input = z.residues(b).mapv(|v| v * state.alpha);
        let (_, cache) = diffusion.forward_residues(input.view(), t)?;
        for (layer, block) in cache.stack().blocks().iter().enumerate() {
            acc.add(layer, block.attention_weights(), batch.lengths[b])?;
        }
    }
    Ok(acc.finish())
}

pub fn attention_fractions(
    backbone: &Backbone,
    seqs: &[TokenSequence],
    representation: Representation,
) -> Result<Vec<AttentionFractions>> {
    let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let batch = pad_batch_to(seqs, longest + 2)?;
    match representation {
        Representation::Encoder => encoder_attention(&backbone.encoder, &batch),
        Representation::Diffusion(t) => {
            let diffusion = backbone
                .diffusion
                .as_ref()
                .ok_or_else(|| Error::Config("diffusion attention needs a diffusion checkpoint".into()))?;
            diffusion_attention(&backbone.encoder, diffusion, &batch, t)
        }
    }
}

/// Whether context mass is highest in the first layer.
pub fn context_peaks_early(fractions: &[AttentionFractions]) -> bool {
    match fractions.first() {
        Some(first) => fractions.iter().all(|f| f.context <= first.context),
        None => false,
    }
}

pub fn write_fractions<W: Write>(out: &mut W, fractions: &[AttentionFractions]) -> Result<()> {
    writeln!(out, "layer\tcontext\tlocal\tedge")?;
    for f in fractions {
        writeln!(out, "{}\t{}\t{}\t{}", f.layer, f.context, f.local, f.edge)?;
    }
    Ok(())
}

/// Per-residue vectors as rows `seq_id  position  aa  z0 .. z{d-1}`, with
/// 1-based positions. Sequences without an id are named by their index.
pub fn export_embeddings<W: Write>(
    out: &mut W,
    backbone: &Backbone,
    seqs: &[TokenSequence],
    representation: Representation,
) -> Result<usize> {
    let d = backbone.dim();
    write!(out, "seq_id\tposition\taa")?;
    for k in 0..d {
        write!(out, "\tz{k}")?;
    }
    writeln!(out)?;
    let mut rows = 0;
    for (c, chunk) in seqs.chunks(32).enumerate() {
        let latents = backbone.latents(chunk, representation)?;
        for (i, seq) in chunk.iter().enumerate() {
            let id = seq.id.clone().unwrap_or_else(|| format!("seq{}", c * 32 + i));
            let z = latents.residues(i);
            for (p, &tok) in seq.residues.iter().enumerate() {
                let aa = Vocabulary::letter(tok).ok_or_else(|| Error::Shape(format!("token {tok} is not a residue")))?;
                write!(out, "{id}\t{}\t{aa}", p + 1)?;
                for v in z.row(p) {
                    write!(out, "\t{v}")?;
                }
                writeln!(out)?;
                rows += 1;
            }
        }
    }
    Ok(rows)
}

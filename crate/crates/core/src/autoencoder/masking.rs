use std::f64::consts::FRAC_PI_2;

use ndarray::{s, Array2, Array3};
use rand::Rng;

use super::LatentBatch;
use crate::error::{Error, Result};
use crate::seqdata::{TokenBatch, MASK};

/// Interpolate each residue latent towards noise,
/// `z_a -> cos(πt_a/2) z_a + sin(πt_a/2) ε_a`, and return the per-position
/// reconstruction weights `sin²(πt_a/2)` (zero off the residue mask).
pub fn noise_mask(latents: &LatentBatch, t_a: &Array2<f64>, eps: &Array3<f64>) -> Result<(LatentBatch, Array2<f64>)> {
    let (b, p, _) = latents.z.dim();
    if t_a.dim() != (b, p) || eps.dim() != latents.z.dim() {
        return Err(Error::Shape(format!(
            "noise mask: times {:?}, eps {:?}, latents {:?}",
            t_a.dim(),
            eps.dim(),
            latents.z.dim()
        )));
    }
    let mut noised = latents.clone();
    let mut weights = Array2::zeros((b, p));
    for ((i, j), &m) in latents.residue_mask.indexed_iter() {
        if !m {
            continue;
        }
        let t = t_a[[i, j]];
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::TimeRange { t, range: "(0, 1)" });
        }
        let (sin, cos) = (FRAC_PI_2 * t).sin_cos();
        let mut row = noised.z.slice_mut(s![i, j, ..]);
        row *= cos;
        row.scaled_add(sin, &eps.slice(s![i, j, ..]));
        weights[[i, j]] = sin * sin;
    }
    Ok((noised, weights))
}

/// Replace each residue token with MASK independently with probability
/// `rate`. Returns the masked batch and the indicator of replaced positions.
pub fn mlm_mask<R: Rng + ?Sized>(batch: &TokenBatch, rate: f64, rng: &mut R) -> Result<(TokenBatch, Array2<bool>)> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!("masking rate {rate} outside (0, 1)")));
    }
    let mut masked = batch.clone();
    let mut indicator = Array2::from_elem(batch.mask.raw_dim(), false);
    for ((i, j), &m) in batch.mask.indexed_iter() {
        if m && rng.random::<f64>() < rate {
            masked.tokens[[i, j]] = MASK;
            indicator[[i, j]] = true;
        }
    }
    Ok((masked, indicator))
}

/// Per-position cross-entropy on residue positions (zero elsewhere).
pub fn position_cross_entropy(logits: &Array3<f64>, tokens: &Array2<u8>, residue_mask: &Array2<bool>) -> Result<Array2<f64>> {
    let (b, p, k) = logits.dim();
    if tokens.dim() != (b, p) || residue_mask.dim() != (b, p) {
        return Err(Error::Shape("position cross-entropy inputs disagree".into()));
    }
    let mut out = Array2::zeros((b, p));
    for ((i, j), &m) in residue_mask.indexed_iter() {
        if !m {
            continue;
        }
        let target = tokens[[i, j]] as usize;
        if target >= k {
            return Err(Error::Shape(format!("target {target} outside {k} classes")));
        }
        let row = logits.slice(s![i, j, ..]);
        let max = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
        let log_z = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        out[[i, j]] = log_z - row[target];
    }
    Ok(out)
}

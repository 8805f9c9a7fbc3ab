use std::f64::consts::FRAC_PI_2;

use ndarray::{s, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::losses::{kl_norm_with_grad, reconstruction_loss, token_norm_loss, NormForm};
use super::masking::{mlm_mask, noise_mask};
use super::{AutoencoderModel, DecoderCache, EncoderCache};
use crate::error::{Error, Result};
use crate::sampling::{sample_time, TimeSampling};
use crate::seqdata::TokenBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Separate normalization loss per amino-acid type.
    TokenNorm,
    /// Amplitude-weighted reconstruction from position-wise noised latents.
    NoiseMask,
    /// Masked language modelling with a projection-only decoder.
    Mlm,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::TokenNorm => "tn",
            Regime::NoiseMask => "nm",
            Regime::Mlm => "mlm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tn" | "lsd-tn" | "token-norm" => Ok(Regime::TokenNorm),
            "nm" | "lsd-nm" | "noise-mask" => Ok(Regime::NoiseMask),
            "mlm" => Ok(Regime::Mlm),
            other => Err(Error::Config(format!("unknown regime '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeConfig {
    pub regime: Regime,
    pub norm_form: NormForm,
    /// Weight of the normalization term relative to reconstruction.
    pub norm_weight: f64,
    pub nm_sampling: TimeSampling,
    pub mlm_rate: f64,
}

impl RegimeConfig {
    pub fn new(regime: Regime) -> Self {
        Self {
            regime,
            norm_form: NormForm::Univariate,
            norm_weight: 1.0,
            nm_sampling: TimeSampling::Amplitude,
            mlm_rate: 0.15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.norm_weight >= 0.0 && self.norm_weight.is_finite()) {
            return Err(Error::Config(format!("norm weight {} must be finite and >= 0", self.norm_weight)));
        }
        if !(self.mlm_rate > 0.0 && self.mlm_rate < 1.0) {
            return Err(Error::Config(format!("mlm rate {} outside (0, 1)", self.mlm_rate)));
        }
        Ok(())
    }

    /// Whether this regime uses the projection-only decoder.
    pub fn trivial_decoder(&self) -> bool {
        self.regime == Regime::Mlm
    }
}

/// Loss of one batch. `total = reconstruction + norm_weight * normalization`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub normalization: f64,
    /// Residue positions carrying reconstruction weight; zero means the batch
    /// contributes nothing (an MLM draw that masked no position).
    pub active_positions: usize,
}

impl RegimeLoss {
    fn skipped() -> Self {
        Self {
            total: 0.0,
            reconstruction: 0.0,
            normalization: 0.0,
            active_positions: 0,
        }
    }
}

struct RegimeForward {
    loss: RegimeLoss,
    lengths: Vec<usize>,
    enc_caches: Vec<EncoderCache>,
    dec_caches: Vec<DecoderCache>,
    dlogits: Array3<f64>,
    norm_grad: Option<Array3<f64>>,
    noise_times: Option<Array2<f64>>,
}

/// Evaluate the regime's loss on `batch` without touching gradients.
pub fn regime_loss<R: Rng + ?Sized>(
    model: &AutoencoderModel,
    batch: &TokenBatch,
    regime: &RegimeConfig,
    rng: &mut R,
) -> Result<RegimeLoss> {
    Ok(model.forward_regime(batch, regime, rng)?.map_or(RegimeLoss::skipped(), |f| f.loss))
}

impl AutoencoderModel {
    /// Evaluate the loss and accumulate its gradient into the parameters.
    pub fn regime_step<R: Rng + ?Sized>(
        &mut self,
        batch: &TokenBatch,
        regime: &RegimeConfig,
        rng: &mut R,
    ) -> Result<RegimeLoss> {
        let Some(f) = self.forward_regime(batch, regime, rng)? else {
            return Ok(RegimeLoss::skipped());
        };
        let mut dz = self.backward_decoder(&f.dec_caches, &f.dlogits, &f.lengths);
        if let Some(times) = &f.noise_times {
            for ((i, j), &t) in times.indexed_iter() {
                if t > 0.0 {
                    let mut row = dz.slice_mut(s![i, j, ..]);
                    row *= (FRAC_PI_2 * t).cos();
                }
            }
        }
        if let Some(g) = &f.norm_grad {
            dz.scaled_add(regime.norm_weight, g);
        }
        self.backward_encoder(&f.enc_caches, &dz, &f.lengths);
        Ok(f.loss)
    }

    fn forward_regime<R: Rng + ?Sized>(
        &self,
        batch: &TokenBatch,
        regime: &RegimeConfig,
        rng: &mut R,
    ) -> Result<Option<RegimeForward>> {
        regime.validate()?;
        if regime.trivial_decoder() != self.decoder.is_trivial() {
            return Err(Error::Config(format!(
                "regime '{}' does not match the decoder (trivial = {})",
                regime.regime.name(),
                self.decoder.is_trivial()
            )));
        }

        let (input, mlm_indicator) = match regime.regime {
            Regime::Mlm => {
                let (masked, indicator) = mlm_mask(batch, regime.mlm_rate, rng)?;
                if !indicator.iter().any(|&m| m) {
                    return Ok(None);
                }
                (masked, Some(indicator))
            }
            _ => (batch.clone(), None),
        };

        let (latents, enc_caches) = self.encode_with_cache(&input)?;

        let (normalization, norm_grad) = match regime.regime {
            Regime::TokenNorm => {
                let (v, g) = token_norm_loss(&latents, &batch.tokens, &batch.mask, regime.norm_form)?;
                (v, Some(g))
            }
            Regime::NoiseMask => {
                let (v, g) = kl_norm_with_grad(&latents, &batch.mask, regime.norm_form)?;
                (v, Some(g))
            }
            Regime::Mlm => (0.0, None),
        };

        let (decoder_input, weights, noise_times) = match regime.regime {
            Regime::NoiseMask => {
                let mut times = Array2::zeros(batch.mask.raw_dim());
                for ((i, j), &m) in batch.mask.indexed_iter() {
                    if m {
                        times[[i, j]] = sample_time(regime.nm_sampling, rng);
                    }
                }
                let mut eps = Array3::zeros(latents.z.raw_dim());
                for ((i, j), &m) in batch.mask.indexed_iter() {
                    if m {
                        for v in eps.slice_mut(s![i, j, ..]).iter_mut() {
                            *v = StandardNormal.sample(rng);
                        }
                    }
                }
                let (noised, w) = noise_mask(&latents, &times, &eps)?;
                (noised, Some(w), Some(times))
            }
            Regime::Mlm => {
                let w = mlm_indicator
                    .as_ref()
                    .map(|ind| ind.mapv(|m| if m { 1.0 } else { 0.0 }));
                (latents, w, None)
            }
            Regime::TokenNorm => (latents, None, None),
        };

        let (logits, dec_caches) = self.decode_with_cache(&decoder_input)?;
        let (reconstruction, dlogits) = reconstruction_loss(&logits, &batch.tokens, &batch.mask, weights.as_ref())?;
        let active_positions = match &weights {
            Some(w) => w.iter().filter(|&&x| x > 0.0).count(),
            None => batch.residue_count(),
        };
        let total = reconstruction + regime.norm_weight * normalization;
        Ok(Some(RegimeForward {
            loss: RegimeLoss {
                total,
                reconstruction,
                normalization,
                active_positions,
            },
            lengths: batch.lengths.clone(),
            enc_caches,
            dec_caches,
            dlogits,
            norm_grad,
            noise_times,
        }))
    }
}

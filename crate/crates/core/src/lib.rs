//! Latent space diffusion for protein sequence representations.
//!
//! A transformer autoencoder maps amino-acid sequences to per-residue latent
//! vectors, regularized either per amino-acid type (token norm) or through
//! position-wise noise masking. A time-conditioned transformer is then
//! trained as a v-prediction diffusion model on those latents, and its
//! outputs at a chosen noise level give a one-parameter family of
//! representations that can be probed with small frozen-backbone predictors.

pub mod error;
pub mod analysis;
pub mod autoencoder;
pub mod diffusion;
pub mod gradcheck;
pub(crate) mod linalg;
pub mod nn;
pub mod probe;
pub mod sampling;
pub mod seqdata;
pub mod training;

pub use error::{Error, Result};

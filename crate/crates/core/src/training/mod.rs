//! Optimization loops for the autoencoder and diffusion towers, with
//! deterministic data order, metrics logging and checkpointing.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointKind, MAGIC, VERSION};
pub use config::{Preset, TrainConfig};
pub use optim::{AdamW, AdamWConfig, Moment};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autoencoder::{AutoencoderModel, Encoder, RegimeLoss};
use crate::diffusion::{DiffusionBatch, DiffusionModel};
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::seqdata::{pad_batch, TokenBatch, TokenSequence};

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_STEP: u64 = 2;

/// Independent generator for `(seed, purpose, index)`.
pub fn derived_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 56) | (index & ((1 << 56) - 1)));
    rng
}

/// Generator used to initialize model parameters for `seed`.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    derived_rng(seed, STREAM_INIT, 0)
}

/// Epoch-wise shuffled batches; the batch for a given step depends only on
/// the seed and the step index.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    data: Vec<TokenSequence>,
    batch_size: usize,
    seed: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(data: Vec<TokenSequence>, batch_size: usize, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self {
            data,
            batch_size,
            seed,
            epoch: None,
        })
    }

    fn order(&mut self, epoch: u64) -> &[usize] {
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.data.len()).collect();
            order.shuffle(&mut derived_rng(self.seed, STREAM_SHUFFLE, epoch));
            self.epoch = Some((epoch, order));
        }
        &self.epoch.as_ref().unwrap().1
    }

    /// Sequences of the batch at `step` (0-based).
    pub fn batch(&mut self, step: u64) -> Result<TokenBatch> {
        let n = self.data.len() as u64;
        let start = step * self.batch_size as u64;
        let mut seqs = Vec::with_capacity(self.batch_size);
        for g in start..start + self.batch_size as u64 {
            let idx = self.order(g / n)[(g % n) as usize];
            seqs.push(self.data[idx].clone());
        }
        pad_batch(&seqs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub total: f64,
    pub reconstruction: f64,
    pub normalization: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "step\ttotal\treconstruction\tnormalization";

    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.step, self.total, self.reconstruction, self.normalization)
    }
}

/// Hash chain over the logged rows: `h_k = SHA-256(h_{k-1} ‖ row_k)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LossDigest(pub [u8; 32]);

impl LossDigest {
    pub fn update(&mut self, row: &MetricsRow) {
        let mut h = Sha256::new();
        h.update(self.0);
        h.update(row.step.to_le_bytes());
        for v in [row.total, row.reconstruction, row.normalization] {
            h.update(v.to_le_bytes());
        }
        self.0 = h.finalize().into();
    }

    pub fn value(&self) -> [u8; 32] {
        self.0
    }
}

fn check_finite(step: u64, loss: &RegimeLoss) -> Result<()> {
    if loss.total.is_finite() && loss.reconstruction.is_finite() && loss.normalization.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            total: loss.total,
            reconstruction: loss.reconstruction,
            normalization: loss.normalization,
        })
    }
}

fn filter_length(data: Vec<TokenSequence>, max_length: usize) -> Vec<TokenSequence> {
    data.into_iter().filter(|s| s.len() <= max_length).collect()
}

pub struct AutoencoderTrainer {
    pub config: TrainConfig,
    pub model: AutoencoderModel,
    pub optimizer: AdamW,
    sampler: BatchSampler,
    step: u64,
    digest: LossDigest,
}

impl AutoencoderTrainer {
    pub fn new(config: &TrainConfig, data: Vec<TokenSequence>) -> Result<Self> {
        config.validate()?;
        let model = AutoencoderModel::new(
            &config.model,
            config.regime.trivial_decoder(),
            &mut init_rng(config.seed),
        )?;
        let optimizer = AdamW::for_model(config.optimizer, &model);
        Ok(Self {
            config: config.clone(),
            model,
            optimizer,
            sampler: BatchSampler::new(filter_length(data, config.max_length), config.batch_size, config.seed)?,
            step: 0,
            digest: LossDigest::default(),
        })
    }

    /// Continue a run from its checkpoint.
    pub fn resume(checkpoint: &Checkpoint, data: Vec<TokenSequence>) -> Result<Self> {
        if checkpoint.kind != CheckpointKind::Autoencoder {
            return Err(Error::Checkpoint("expected an autoencoder checkpoint".into()));
        }
        let config = TrainConfig::parse(&checkpoint.config_text)?;
        let mut trainer = Self::new(&config, data)?;
        checkpoint.load_params("model", &mut trainer.model)?;
        trainer.optimizer = checkpoint.load_optimizer("model", config.optimizer, &trainer.model)?;
        trainer.step = checkpoint.step;
        trainer.digest = LossDigest(checkpoint.loss_digest);
        Ok(trainer)
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    /// One optimization step on the next batch.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let batch = self.sampler.batch(self.step)?;
        let mut rng = derived_rng(self.config.seed, STREAM_STEP, self.step);
        self.model.zero_grad();
        let loss = self.model.regime_step(&batch, &self.config.regime, &mut rng)?;
        check_finite(self.step, &loss)?;
        if loss.active_positions > 0 {
            self.optimizer.update(&mut self.model)?;
        }
        let row = MetricsRow {
            step: self.step,
            total: loss.total,
            reconstruction: loss.reconstruction,
            normalization: loss.normalization,
        };
        self.digest.update(&row);
        self.step += 1;
        Ok(row)
    }

    /// Run to `config.steps`, writing one metrics line per step.
    pub fn run<W: Write>(&mut self, metrics: &mut W) -> Result<()> {
        if self.step == 0 {
            writeln!(metrics, "{}", MetricsRow::HEADER)?;
        }
        while self.step < self.config.steps {
            let row = self.step()?;
            writeln!(metrics, "{}", row.to_line())?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint {
            kind: CheckpointKind::Autoencoder,
            config_text: self.config.to_text(),
            parent_config_text: String::new(),
            step: self.step,
            seed: self.config.seed,
            loss_digest: self.digest.value(),
            tensors: Vec::new(),
        };
        c.push_params("model", &self.model);
        c.push_optimizer("model", &self.optimizer);
        c
    }
}

/// Trains the diffusion tower on latents of a frozen encoder.
pub struct DiffusionTrainer {
    pub config: TrainConfig,
    pub encoder_config: TrainConfig,
    pub encoder: Encoder,
    pub model: DiffusionModel,
    pub optimizer: AdamW,
    sampler: BatchSampler,
    step: u64,
    digest: LossDigest,
}

impl DiffusionTrainer {
    pub fn new(config: &TrainConfig, encoder_checkpoint: &Checkpoint, data: Vec<TokenSequence>) -> Result<Self> {
        config.validate()?;
        let (encoder_config, encoder) = restore_encoder(encoder_checkpoint)?;
        if encoder.dim() != config.diffusion.channels {
            return Err(Error::Config(format!(
                "encoder latent dimension {} does not match diffusion channels {}",
                encoder.dim(),
                config.diffusion.channels
            )));
        }
        let model = DiffusionModel::new(&config.diffusion, &mut init_rng(config.seed))?;
        let optimizer = AdamW::for_model(config.optimizer, &model);
        Ok(Self {
            config: config.clone(),
            encoder_config,
            encoder,
            model,
            optimizer,
            sampler: BatchSampler::new(filter_length(data, config.max_length), config.batch_size, config.seed)?,
            step: 0,
            digest: LossDigest::default(),
        })
    }

    /// Continue a run from its checkpoint.
    pub fn resume(checkpoint: &Checkpoint, data: Vec<TokenSequence>) -> Result<Self> {
        if checkpoint.kind != CheckpointKind::Diffusion {
            return Err(Error::Checkpoint("expected a diffusion checkpoint".into()));
        }
        let config = TrainConfig::parse(&checkpoint.config_text)?;
        let mut trainer = Self::new(&config, checkpoint, data)?;
        checkpoint.load_params("diffusion", &mut trainer.model)?;
        trainer.optimizer = checkpoint.load_optimizer("diffusion", config.optimizer, &trainer.model)?;
        trainer.step = checkpoint.step;
        trainer.digest = LossDigest(checkpoint.loss_digest);
        Ok(trainer)
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    /// Noised batch for `step` without touching any state.
    pub fn draw_batch(&mut self, step: u64) -> Result<DiffusionBatch> {
        let tokens = self.sampler.batch(step)?;
        let latents = self.encoder.encode(&tokens)?;
        let mut rng = derived_rng(self.config.seed, STREAM_STEP, step);
        DiffusionBatch::draw(&latents, self.config.diffusion_t_sampling, &mut rng)
    }

    pub fn step(&mut self) -> Result<MetricsRow> {
        let batch = self.draw_batch(self.step)?;
        self.model.zero_grad();
        let loss = self.model.loss_step(&batch)?;
        let row = MetricsRow {
            step: self.step,
            total: loss,
            reconstruction: loss,
            normalization: 0.0,
        };
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                total: loss,
                reconstruction: loss,
                normalization: 0.0,
            });
        }
        self.optimizer.update(&mut self.model)?;
        self.digest.update(&row);
        self.step += 1;
        Ok(row)
    }

    pub fn run<W: Write>(&mut self, metrics: &mut W) -> Result<()> {
        if self.step == 0 {
            writeln!(metrics, "{}", MetricsRow::HEADER)?;
        }
        while self.step < self.config.steps {
            let row = self.step()?;
            writeln!(metrics, "{}", row.to_line())?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint {
            kind: CheckpointKind::Diffusion,
            config_text: self.config.to_text(),
            parent_config_text: self.encoder_config.to_text(),
            step: self.step,
            seed: self.config.seed,
            loss_digest: self.digest.value(),
            tensors: Vec::new(),
        };
        c.push_params("encoder", &self.encoder);
        c.push_params("diffusion", &self.model);
        c.push_optimizer("diffusion", &self.optimizer);
        c
    }
}

/// Train an autoencoder from scratch, logging metrics to `metrics`.
pub fn train_autoencoder<W: Write>(config: &TrainConfig, data: Vec<TokenSequence>, metrics: &mut W) -> Result<Checkpoint> {
    let mut trainer = AutoencoderTrainer::new(config, data)?;
    trainer.run(metrics)?;
    Ok(trainer.checkpoint())
}

/// Train a diffusion tower on a frozen encoder taken from `encoder_checkpoint`.
pub fn train_diffusion<W: Write>(
    config: &TrainConfig,
    encoder_checkpoint: &Checkpoint,
    data: Vec<TokenSequence>,
    metrics: &mut W,
) -> Result<Checkpoint> {
    let mut trainer = DiffusionTrainer::new(config, encoder_checkpoint, data)?;
    trainer.run(metrics)?;
    Ok(trainer.checkpoint())
}

/// The config and trained autoencoder stored in an autoencoder checkpoint.
pub fn restore_autoencoder(checkpoint: &Checkpoint) -> Result<(TrainConfig, AutoencoderModel)> {
    if checkpoint.kind != CheckpointKind::Autoencoder {
        return Err(Error::Checkpoint("expected an autoencoder checkpoint".into()));
    }
    let config = TrainConfig::parse(&checkpoint.config_text)?;
    let mut model = AutoencoderModel::new(&config.model, config.regime.trivial_decoder(), &mut init_rng(0))?;
    checkpoint.load_params("model", &mut model)?;
    Ok((config, model))
}

/// The encoder of either checkpoint kind, with the config it was trained under.
pub fn restore_encoder(checkpoint: &Checkpoint) -> Result<(TrainConfig, Encoder)> {
    match checkpoint.kind {
        CheckpointKind::Autoencoder => {
            let (config, model) = restore_autoencoder(checkpoint)?;
            Ok((config, model.encoder))
        }
        CheckpointKind::Diffusion => {
            let config = TrainConfig::parse(&checkpoint.parent_config_text)?;
            let mut encoder = Encoder::new(&config.model, &mut init_rng(0))?;
            checkpoint.load_params("encoder", &mut encoder)?;
            Ok((config, encoder))
        }
    }
}

/// Frozen encoder and diffusion tower from a diffusion checkpoint.
pub fn restore_diffusion(checkpoint: &Checkpoint) -> Result<(TrainConfig, Encoder, DiffusionModel)> {
    if checkpoint.kind != CheckpointKind::Diffusion {
        return Err(Error::Checkpoint("expected a diffusion checkpoint".into()));
    }
    let (_, encoder) = restore_encoder(checkpoint)?;
    let config = TrainConfig::parse(&checkpoint.config_text)?;
    let mut model = DiffusionModel::new(&config.diffusion, &mut init_rng(0))?;
    checkpoint.load_params("diffusion", &mut model)?;
    Ok((config, encoder, model))
}

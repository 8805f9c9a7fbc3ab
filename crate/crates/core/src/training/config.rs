use std::fmt::Write as _;

use crate::autoencoder::{NormForm, Regime, RegimeConfig};
use crate::error::{Error, Result};
use crate::nn::BlockConfig;
use crate::sampling::TimeSampling;
use crate::seqdata::MAX_RESIDUES;

use super::optim::AdamWConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    S,
    M,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::S => "s",
            Preset::M => "m",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Preset::Tiny),
            "s" => Ok(Preset::S),
            "m" => Ok(Preset::M),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

/// Everything that determines a training run. Serialized as flat
/// `key = value` lines with dotted namespaces.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Encoder/decoder stacks (unconditioned).
    pub model: BlockConfig,
    /// Diffusion stack; shares `model.channels`.
    pub diffusion: BlockConfig,
    pub diffusion_t_sampling: TimeSampling,
    pub regime: RegimeConfig,
    pub max_length: usize,
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let (channels, heads, layers, steps, batch_size, lr) = match preset {
            Preset::Tiny => (32, 4, 2, 5000, 16, 1e-3),
            Preset::S => (256, 16, 6, 200_000, 512, 2e-5),
            Preset::M => (512, 16, 6, 100_000, 512, 2e-5),
        };
        Self {
            preset,
            seed: 0,
            steps,
            batch_size,
            optimizer: AdamWConfig {
                learning_rate: lr,
                ..AdamWConfig::default()
            },
            model: BlockConfig::new(channels, heads, layers, false),
            diffusion: BlockConfig::new(channels, heads, layers, true),
            diffusion_t_sampling: TimeSampling::Amplitude,
            regime: RegimeConfig::new(Regime::TokenNorm),
            max_length: MAX_RESIDUES,
        }
    }

    /// Parse a config file. A `preset` key, wherever it appears, selects the
    /// defaults the remaining keys override.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected 'key = value', got '{line}'"),
                });
            };
            let key = k.trim().to_string();
            if entries.iter().any(|(_, e, _): &(usize, String, String)| *e == key) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate key '{key}'"),
                });
            }
            entries.push((i + 1, key, v.trim().to_string()));
        }
        let preset = match entries.iter().find(|(_, k, _)| k == "preset") {
            Some((_, _, v)) => Preset::parse(v)?,
            None => Preset::Tiny,
        };
        let mut config = Self::preset(preset);
        for (line, k, v) in &entries {
            if k != "preset" {
                config.set(k, v).map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("line {line}: {msg}")),
                    other => other,
                })?;
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Override one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
        }
        fn hidden(key: &str, v: &str) -> Result<Option<usize>> {
            if v == "auto" {
                Ok(None)
            } else {
                num(key, v).map(Some)
            }
        }
        match key {
            "preset" => return Err(Error::Config("'preset' selects defaults and can only appear in a config file".into())),
            "train.seed" => self.seed = num(key, value)?,
            "train.steps" => self.steps = num(key, value)?,
            "train.batch_size" => self.batch_size = num(key, value)?,
            "train.learning_rate" => self.optimizer.learning_rate = num(key, value)?,
            "train.weight_decay" => self.optimizer.weight_decay = num(key, value)?,
            "train.beta1" => self.optimizer.beta1 = num(key, value)?,
            "train.beta2" => self.optimizer.beta2 = num(key, value)?,
            "train.eps" => self.optimizer.eps = num(key, value)?,
            "train.clip_norm" => {
                self.optimizer.clip_norm = if value == "none" { None } else { Some(num(key, value)?) }
            }
            "model.channels" => {
                self.model.channels = num(key, value)?;
                self.diffusion.channels = self.model.channels;
            }
            "model.heads" => self.model.heads = num(key, value)?,
            "model.layers" => self.model.layers = num(key, value)?,
            "model.ffn_hidden" => self.model.ffn_hidden = hidden(key, value)?,
            "model.rope_base" => self.model.rope_base = num(key, value)?,
            "diffusion.heads" => self.diffusion.heads = num(key, value)?,
            "diffusion.layers" => self.diffusion.layers = num(key, value)?,
            "diffusion.ffn_hidden" => self.diffusion.ffn_hidden = hidden(key, value)?,
            "diffusion.rope_base" => self.diffusion.rope_base = num(key, value)?,
            "diffusion.t_sampling" => {
                self.diffusion_t_sampling = match value {
                    "importance" | "amplitude" => TimeSampling::Amplitude,
                    "uniform" => TimeSampling::Uniform,
                    _ => return Err(Error::Config(format!("invalid value '{value}' for '{key}'"))),
                }
            }
            "regime.kind" => self.regime.regime = Regime::parse(value)?,
            "regime.norm_form" => {
                self.regime.norm_form = match value {
                    "univariate" => NormForm::Univariate,
                    "multivariate" => NormForm::Multivariate,
                    _ => return Err(Error::Config(format!("invalid value '{value}' for '{key}'"))),
                }
            }
            "regime.norm_weight" => self.regime.norm_weight = num(key, value)?,
            "regime.nm_sampling" => {
                self.regime.nm_sampling = match value {
                    "amplitude" => TimeSampling::Amplitude,
                    "uniform" => TimeSampling::Uniform,
                    _ => return Err(Error::Config(format!("invalid value '{value}' for '{key}'"))),
                }
            }
            "regime.mlm_rate" => self.regime.mlm_rate = num(key, value)?,
            "data.max_length" => self.max_length = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.diffusion.validate()?;
        self.regime.validate()?;
        if self.model.conditioned || !self.diffusion.conditioned {
            return Err(Error::Config("conditioning flags are fixed per tower".into()));
        }
        if self.diffusion.channels != self.model.channels {
            return Err(Error::Config("diffusion channels must equal model channels".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.steps and train.batch_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", o.learning_rate)));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {} must be >= 0", o.weight_decay)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps must be positive".into()));
        }
        if let Some(c) = o.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm {c} must be positive")));
            }
        }
        if self.max_length == 0 || self.max_length > MAX_RESIDUES {
            return Err(Error::Config(format!(
                "data.max_length {} outside 1..={MAX_RESIDUES}",
                self.max_length
            )));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let hidden = |h: Option<usize>| h.map_or("auto".to_string(), |v| v.to_string());
        let form = match self.regime.norm_form {
            NormForm::Univariate => "univariate",
            NormForm::Multivariate => "multivariate",
        };
        let t_sampling = match self.diffusion_t_sampling {
            TimeSampling::Amplitude => "importance",
            TimeSampling::Uniform => "uniform",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.name().into());
        kv("train.seed", self.seed.to_string());
        kv("train.steps", self.steps.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.learning_rate", self.optimizer.learning_rate.to_string());
        kv("train.weight_decay", self.optimizer.weight_decay.to_string());
        kv("train.beta1", self.optimizer.beta1.to_string());
        kv("train.beta2", self.optimizer.beta2.to_string());
        kv("train.eps", self.optimizer.eps.to_string());
        kv(
            "train.clip_norm",
            self.optimizer.clip_norm.map_or("none".into(), |c| c.to_string()),
        );
        kv("model.channels", self.model.channels.to_string());
        kv("model.heads", self.model.heads.to_string());
        kv("model.layers", self.model.layers.to_string());
        kv("model.ffn_hidden", hidden(self.model.ffn_hidden));
        kv("model.rope_base", self.model.rope_base.to_string());
        kv("diffusion.heads", self.diffusion.heads.to_string());
        kv("diffusion.layers", self.diffusion.layers.to_string());
        kv("diffusion.ffn_hidden", hidden(self.diffusion.ffn_hidden));
        kv("diffusion.rope_base", self.diffusion.rope_base.to_string());
        kv("diffusion.t_sampling", t_sampling.into());
        kv("regime.kind", self.regime.regime.name().into());
        kv("regime.norm_form", form.into());
        kv("regime.norm_weight", self.regime.norm_weight.to_string());
        kv("regime.nm_sampling", self.regime.nm_sampling.name().into());
        kv("regime.mlm_rate", self.regime.mlm_rate.to_string());
        kv("data.max_length", self.max_length.to_string());
        s
    }
}

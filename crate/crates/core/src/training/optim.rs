use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::nn::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
            clip_norm: None,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter name in
/// the model's parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: Vec<Moment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moment {
    pub name: String,
    pub m: Array2<f64>,
    pub v: Array2<f64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Zeroed moments matching `model`'s parameters.
    pub fn for_model<M: Parameterized>(config: AdamWConfig, model: &M) -> Self {
        let moments = model
            .params()
            .into_iter()
            .map(|(name, p)| Moment {
                name,
                m: Array2::zeros(p.value.raw_dim()),
                v: Array2::zeros(p.value.raw_dim()),
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    /// Apply one update from the accumulated gradients. Gradients are left
    /// untouched.
    pub fn update<M: Parameterized>(&mut self, model: &mut M) -> Result<()> {
        let c = self.config;
        let mut params = model.params_mut();
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(name, p)| Moment {
                    name: name.clone(),
                    m: Array2::zeros(p.value.raw_dim()),
                    v: Array2::zeros(p.value.raw_dim()),
                })
                .collect();
        }
        if params.len() != self.moments.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, model has {}",
                self.moments.len(),
                params.len()
            )));
        }
        for ((name, p), mom) in params.iter().zip(&self.moments) {
            if *name != mom.name || p.value.dim() != mom.m.dim() {
                return Err(Error::Shape(format!("optimizer state does not match tensor '{name}'")));
            }
        }

        let mut scale = 1.0;
        if let Some(max_norm) = c.clip_norm {
            let norm = params
                .iter()
                .map(|(_, p)| p.grad.iter().map(|g| g * g).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.learning_rate * c.weight_decay;
        for ((_, p), mom) in params.iter_mut().zip(self.moments.iter_mut()) {
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut mom.m)
                .and(&mut mom.v)
                .for_each(|w, &g, m, v| {
                    let g = g * scale;
                    *w *= decay;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
                });
        }
        Ok(())
    }
}

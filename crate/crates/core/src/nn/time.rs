use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{join, silu, silu_grad, Linear, Param, Parameterized};
use crate::error::{Error, Result};

const MAX_PERIOD: f64 = 10_000.0;
/// `t ∈ [0, 1]` is stretched onto the usual integer-timestep range before
/// the sinusoids are taken.
const TIME_SCALE: f64 = 1000.0;

/// Sinusoidal featurization of `t` followed by a two-layer SiLU MLP.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    pub fc1: Linear,
    pub fc2: Linear,
    dim: usize,
}

#[derive(Debug, Clone)]
pub struct TimeEmbeddingCache {
    features: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl TimeEmbedding {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(dim, dim, true, rng),
            fc2: Linear::new(dim, dim, true, rng),
            dim,
        }
    }

    pub fn features(&self, t: f64) -> Result<Array1<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeRange { t, range: "[0, 1]" });
        }
        let half = self.dim / 2;
        let mut out = Array1::zeros(self.dim);
        for k in 0..half {
            let freq = (-(MAX_PERIOD.ln()) * k as f64 / half as f64).exp();
            let arg = TIME_SCALE * t * freq;
            out[k] = arg.cos();
            out[half + k] = arg.sin();
        }
        Ok(out)
    }

    pub fn forward(&self, t: f64) -> Result<(Array1<f64>, TimeEmbeddingCache)> {
        let features = self.features(t)?.insert_axis(Axis(0));
        let hidden_pre = self.fc1.forward(&features);
        let hidden = hidden_pre.mapv(silu);
        let out = self.fc2.forward(&hidden).row(0).to_owned();
        Ok((
            out,
            TimeEmbeddingCache {
                features,
                hidden_pre,
                hidden,
            },
        ))
    }

    pub fn embed(&self, t: f64) -> Result<Array1<f64>> {
        self.forward(t).map(|(e, _)| e)
    }

    pub fn backward(&mut self, cache: &TimeEmbeddingCache, dy: &Array1<f64>) {
        let dy = dy.clone().insert_axis(Axis(0));
        let dhidden = self.fc2.backward(&cache.hidden, &dy);
        let dpre = dhidden * &cache.hidden_pre.mapv(silu_grad);
        self.fc1.backward(&cache.features, &dpre);
    }
}

impl Parameterized for TimeEmbedding {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.fc1.collect_params(&join(prefix, "fc1"), out);
        self.fc2.collect_params(&join(prefix, "fc2"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.fc1.collect_params_mut(&join(prefix, "fc1"), out);
        self.fc2.collect_params_mut(&join(prefix, "fc2"), out);
    }
}

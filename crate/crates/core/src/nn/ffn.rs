use ndarray::Array2;
use rand::Rng;

use super::{join, silu, silu_grad, Linear, Param, Parameterized};

/// Gated feed-forward `(silu(x W_gate) ⊙ (x W_up)) W_down`, no biases.
#[derive(Debug, Clone)]
pub struct SwiGlu {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone)]
pub struct SwiGluCache {
    input: Array2<f64>,
    gate_pre: Array2<f64>,
    up: Array2<f64>,
    hidden: Array2<f64>,
}

impl SwiGlu {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            gate: Linear::new(dim, hidden, false, rng),
            up: Linear::new(dim, hidden, false, rng),
            down: Linear::new(hidden, dim, false, rng),
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.gate.out_features()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, SwiGluCache) {
        let gate_pre = self.gate.forward(x);
        let up = self.up.forward(x);
        let hidden = gate_pre.mapv(silu) * &up;
        let y = self.down.forward(&hidden);
        (
            y,
            SwiGluCache {
                input: x.clone(),
                gate_pre,
                up,
                hidden,
            },
        )
    }

    pub fn backward(&mut self, cache: &SwiGluCache, dy: &Array2<f64>) -> Array2<f64> {
        let dhidden = self.down.backward(&cache.hidden, dy);
        let dup = &dhidden * &cache.gate_pre.mapv(silu);
        let mut dgate = dhidden * &cache.up;
        dgate *= &cache.gate_pre.mapv(silu_grad);
        let mut dx = self.gate.backward(&cache.input, &dgate);
        dx += &self.up.backward(&cache.input, &dup);
        dx
    }
}

impl Parameterized for SwiGlu {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.gate.collect_params(&join(prefix, "gate"), out);
        self.up.collect_params(&join(prefix, "up"), out);
        self.down.collect_params(&join(prefix, "down"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.gate.collect_params_mut(&join(prefix, "gate"), out);
        self.up.collect_params_mut(&join(prefix, "up"), out);
        self.down.collect_params_mut(&join(prefix, "down"), out);
    }
}

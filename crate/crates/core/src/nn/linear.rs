use ndarray::{Array2, Axis};
use rand::Rng;

use super::{join, Param, Parameterized};

/// `y = x W (+ b)` with `W` stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    /// Gaussian init with variance `1 / fan_in`.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Param::normal(fan_in, fan_out, std, rng),
            bias: bias.then(|| Param::zeros(1, fan_out)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            weight: Param::zeros(fan_in, fan_out),
            bias: bias.then(|| Param::zeros(1, fan_out)),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.value);
        if let Some(b) = &self.bias {
            y += &b.value.row(0);
        }
        y
    }

    /// `x` is the input that was given to `forward`.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.weight.grad += &x.t().dot(dy);
        if let Some(b) = &mut self.bias {
            let db = dy.sum_axis(Axis(0));
            let mut row = b.grad.row_mut(0);
            row += &db;
        }
        dy.dot(&self.weight.value.t())
    }
}

impl Parameterized for Linear {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

use ndarray::{Array1, Array2, Axis};

use super::{join, Param, Parameterized};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalization, optionally with a learned gain and bias.
/// The adaLN-modulated blocks use the non-affine form.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Option<Param>,
    pub bias: Option<Param>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNormCache {
    pub fn normalized(&self) -> &Array2<f64> {
        &self.xhat
    }
}

impl LayerNorm {
    pub fn affine(dim: usize) -> Self {
        Self {
            gain: Some(Param::filled(1, dim, 1.0)),
            bias: Some(Param::zeros(1, dim)),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn plain() -> Self {
        Self {
            gain: None,
            bias: None,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
        let mut y = xhat.clone();
        if let Some(g) = &self.gain {
            y *= &g.value.row(0);
        }
        if let Some(b) = &self.bias {
            y += &b.value.row(0);
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        let LayerNormCache { xhat, inv_std } = cache;
        if let Some(b) = &mut self.bias {
            let mut row = b.grad.row_mut(0);
            row += &dy.sum_axis(Axis(0));
        }
        let dxhat = match &mut self.gain {
            Some(g) => {
                let mut row = g.grad.row_mut(0);
                row += &(dy * xhat).sum_axis(Axis(0));
                dy * &g.value.row(0)
            }
            None => dy.clone(),
        };
        let d = xhat.ncols() as f64;
        let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
        let mean_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(1)) / d;
        let mut dx = dxhat;
        dx -= &mean_dxhat.view().insert_axis(Axis(1));
        dx -= &(xhat * &mean_dxhat_xhat.view().insert_axis(Axis(1)));
        dx *= &inv_std.view().insert_axis(Axis(1));
        dx
    }
}

impl Parameterized for LayerNorm {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        if let Some(g) = &self.gain {
            out.push((join(prefix, "gain"), g));
        }
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        if let Some(g) = &mut self.gain {
            out.push((join(prefix, "gain"), g));
        }
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

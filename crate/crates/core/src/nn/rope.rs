//! Rotary position embedding.
//!
//! Feature pairs `(2i, 2i+1)` are rotated by `position * base^(-2i/dim)`.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone)]
pub struct RotaryEmbedding {
    dim: usize,
    inv_freq: Vec<f64>,
}

impl RotaryEmbedding {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary embedding needs an even feature dimension, got {dim}"
            )));
        }
        let inv_freq = (0..dim / 2)
            .map(|i| base.powf(-(2.0 * i as f64) / dim as f64))
            .collect();
        Ok(Self { dim, inv_freq })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rotate the rows of `x` (one row per position) in place. `inverse`
    /// applies the transpose rotation, which is the reverse-mode map.
    pub fn rotate_in_place(&self, mut x: ArrayViewMut2<f64>, positions: &[usize], inverse: bool) {
        debug_assert_eq!(x.ncols(), self.dim);
        debug_assert_eq!(x.nrows(), positions.len());
        let sign = if inverse { -1.0 } else { 1.0 };
        for (mut row, &pos) in x.rows_mut().into_iter().zip(positions) {
            if pos == 0 {
                continue;
            }
            for (i, &f) in self.inv_freq.iter().enumerate() {
                let (s, c) = (sign * pos as f64 * f).sin_cos();
                let a = row[2 * i];
                let b = row[2 * i + 1];
                row[2 * i] = a * c - b * s;
                row[2 * i + 1] = a * s + b * c;
            }
        }
    }

    pub fn rotate(&self, x: ArrayView2<f64>, positions: &[usize]) -> Array2<f64> {
        let mut out = x.to_owned();
        self.rotate_in_place(out.view_mut(), positions, false);
        out
    }
}

/// Rotate per-position feature vectors (`positions.len() × dim`).
pub fn rope_rotate(x: ArrayView2<f64>, positions: &[usize], base: f64) -> Result<Array2<f64>> {
    if x.nrows() != positions.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} positions",
            x.nrows(),
            positions.len()
        )));
    }
    Ok(RotaryEmbedding::new(x.ncols(), base)?.rotate(x, positions))
}

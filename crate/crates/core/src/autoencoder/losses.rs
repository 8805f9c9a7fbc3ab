//! Reconstruction and normalization losses, each returned together with its
//! gradient in the padded batch layout.

use ndarray::{Array1, Array2, Array3, Axis};

use super::LatentBatch;
use crate::error::{Error, Result};
use crate::linalg;
use crate::seqdata::NUM_AMINO_ACIDS;

/// Floor applied to `σ²` inside the logarithm.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Ridge added to the empirical covariance before factorization.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

/// Per-coordinate empirical moments of a set of latent vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSummary {
    pub mu: Array1<f64>,
    /// Biased (`1/N`) variance.
    pub var: Array1<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormForm {
    Univariate,
    Multivariate,
}

impl NormForm {
    pub fn name(self) -> &'static str {
        match self {
            NormForm::Univariate => "univariate",
            NormForm::Multivariate => "multivariate",
        }
    }
}

/// Weighted mean cross-entropy over residue positions.
pub fn reconstruction_loss(
    logits: &Array3<f64>,
    tokens: &Array2<u8>,
    residue_mask: &Array2<bool>,
    weights: Option<&Array2<f64>>,
) -> Result<(f64, Array3<f64>)> {
    let (b, p, k) = logits.dim();
    if tokens.dim() != (b, p) || residue_mask.dim() != (b, p) {
        return Err(Error::Shape(format!(
            "logits {:?}, tokens {:?}, mask {:?}",
            logits.dim(),
            tokens.dim(),
            residue_mask.dim()
        )));
    }
    if let Some(w) = weights {
        if w.dim() != (b, p) {
            return Err(Error::Shape(format!("weights {:?} vs {:?}", w.dim(), (b, p))));
        }
        if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
    }
    let weight_at = |i: usize, j: usize| weights.map_or(1.0, |w| w[[i, j]]);
    let total_weight: f64 = residue_mask
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|((i, j), _)| weight_at(i, j))
        .sum();
    if total_weight <= 0.0 {
        return Err(Error::ZeroWeight);
    }
    let mut loss = 0.0;
    let mut grad = Array3::zeros((b, p, k));
    for ((i, j), &m) in residue_mask.indexed_iter() {
        if !m {
            continue;
        }
        let w = weight_at(i, j);
        if w == 0.0 {
            continue;
        }
        let target = tokens[[i, j]] as usize;
        if target >= k {
            return Err(Error::Shape(format!("target {target} outside {k} classes")));
        }
        let row = logits.slice(ndarray::s![i, j, ..]);
        let max = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
        let sum_exp: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss += w * (log_z - row[target]);
        let scale = w / total_weight;
        for c in 0..k {
            let p = (row[c] - log_z).exp();
            grad[[i, j, c]] = scale * (p - if c == target { 1.0 } else { 0.0 });
        }
    }
    Ok((loss / total_weight, grad))
}

/// Gather the latent rows selected by `subset` into an `N × d` matrix.
pub(crate) fn gather(latents: &LatentBatch, subset: &Array2<bool>) -> Result<(Array2<f64>, Vec<(usize, usize)>)> {
    let (b, p, d) = latents.z.dim();
    if subset.dim() != (b, p) {
        return Err(Error::Shape(format!("subset {:?} vs batch {:?}", subset.dim(), (b, p))));
    }
    let index: Vec<(usize, usize)> = subset
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|(ij, _)| ij)
        .collect();
    let mut rows = Array2::zeros((index.len(), d));
    for (r, &(i, j)) in index.iter().enumerate() {
        rows.row_mut(r).assign(&latents.z.slice(ndarray::s![i, j, ..]));
    }
    Ok((rows, index))
}

fn scatter(grad_rows: &Array2<f64>, index: &[(usize, usize)], shape: (usize, usize, usize)) -> Array3<f64> {
    let mut out = Array3::zeros(shape);
    for (r, &(i, j)) in index.iter().enumerate() {
        out.slice_mut(ndarray::s![i, j, ..]).assign(&grad_rows.row(r));
    }
    out
}

pub fn moments_of_rows(rows: &Array2<f64>) -> Result<MomentSummary> {
    let n = rows.nrows();
    if n < 2 {
        return Err(Error::InsufficientSample { got: n, need: 2 });
    }
    let mu = rows.sum_axis(Axis(0)) / n as f64;
    let centered = rows - &mu;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n as f64;
    Ok(MomentSummary { mu, var, count: n })
}

/// Moments pooled over the `(batch, position)` entries selected by `subset`.
pub fn moments(latents: &LatentBatch, subset: &Array2<bool>) -> Result<MomentSummary> {
    let (rows, _) = gather(latents, subset)?;
    moments_of_rows(&rows)
}

/// `(1/2d) Σ_i (μ_i² + σ_i² − log σ_i² − 1)`.
pub fn kl_norm_univariate(m: &MomentSummary) -> Result<f64> {
    if m.mu.iter().chain(m.var.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("moment summary".into()));
    }
    let d = m.mu.len() as f64;
    let total: f64 = m
        .mu
        .iter()
        .zip(&m.var)
        .map(|(&mu, &var)| mu * mu + var - var.max(VARIANCE_FLOOR).ln() - 1.0)
        .sum();
    Ok(total / (2.0 * d))
}

/// Univariate KL of the rows and its gradient with respect to each row.
pub fn kl_univariate_rows(rows: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let m = moments_of_rows(rows)?;
    let value = kl_norm_univariate(&m)?;
    let n = rows.nrows() as f64;
    let d = rows.ncols() as f64;
    let inv_var = m.var.mapv(|v| if v > VARIANCE_FLOOR { 1.0 / v } else { 0.0 });
    let mean_term = &m.mu * (2.0 / (n * 2.0 * d));
    let var_coef = (1.0 - &inv_var) * (2.0 / (n * 2.0 * d));
    let mut grad = rows - &m.mu;
    grad *= &var_coef;
    grad += &mean_term;
    Ok((value, grad))
}

/// `(1/2d)(μᵀμ + tr Σ − log det Σ − d)` with `Σ` the ridge-regularized
/// empirical covariance, and its gradient with respect to each row.
pub fn kl_multivariate_rows(rows: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let n = rows.nrows();
    let d = rows.ncols();
    if n <= d {
        return Err(Error::InsufficientSample { got: n, need: d + 1 });
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent rows".into()));
    }
    let nf = n as f64;
    let mu = rows.sum_axis(Axis(0)) / nf;
    let centered = rows - &mu;
    let mut sigma = centered.t().dot(&centered) / nf;
    for i in 0..d {
        sigma[[i, i]] += COVARIANCE_RIDGE;
    }
    let (log_det, inv) =
        linalg::spd_log_det_inverse(&sigma).ok_or_else(|| Error::Singular("latent covariance".into()))?;
    let trace: f64 = (0..d).map(|i| sigma[[i, i]]).sum();
    let df = d as f64;
    let value = (mu.dot(&mu) + trace - log_det - df) / (2.0 * df);
    if !value.is_finite() {
        return Err(Error::Singular("latent covariance".into()));
    }
    let mut g = -inv;
    for i in 0..d {
        g[[i, i]] += 1.0;
    }
    let mut grad = centered.dot(&g) * (2.0 / (nf * 2.0 * df));
    grad += &(&mu * (2.0 / (nf * 2.0 * df)));
    Ok((value, grad))
}

pub fn kl_norm_multivariate(latents: &LatentBatch, subset: &Array2<bool>) -> Result<f64> {
    let (rows, _) = gather(latents, subset)?;
    kl_multivariate_rows(&rows).map(|(v, _)| v)
}

/// Normalization loss over `subset` in the requested form, with its gradient.
pub fn kl_norm_with_grad(latents: &LatentBatch, subset: &Array2<bool>, form: NormForm) -> Result<(f64, Array3<f64>)> {
    let (rows, index) = gather(latents, subset)?;
    let (value, grad_rows) = match form {
        NormForm::Univariate => kl_univariate_rows(&rows)?,
        NormForm::Multivariate => kl_multivariate_rows(&rows)?,
    };
    Ok((value, scatter(&grad_rows, &index, latents.z.dim())))
}

/// Mean normalization loss over amino-acid types, each type's latents
/// normalized separately. Types with too few occurrences (fewer than 2, or
/// no more than `d` for the multivariate form) are skipped.
pub fn token_norm_loss(
    latents: &LatentBatch,
    tokens: &Array2<u8>,
    residue_mask: &Array2<bool>,
    form: NormForm,
) -> Result<(f64, Array3<f64>)> {
    let shape = latents.z.dim();
    if tokens.dim() != (shape.0, shape.1) || residue_mask.dim() != (shape.0, shape.1) {
        return Err(Error::Shape("token norm inputs disagree on batch layout".into()));
    }
    let d = shape.2;
    let min_count = match form {
        NormForm::Univariate => 2,
        NormForm::Multivariate => d + 1,
    };
    let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); NUM_AMINO_ACIDS];
    for ((i, j), &m) in residue_mask.indexed_iter() {
        if m {
            let t = tokens[[i, j]] as usize;
            if t < NUM_AMINO_ACIDS {
                groups[t].push((i, j));
            }
        }
    }
    let active: Vec<&Vec<(usize, usize)>> = groups.iter().filter(|g| g.len() >= min_count).collect();
    if active.is_empty() {
        return Err(Error::InsufficientSample { got: 0, need: min_count });
    }
    let scale = 1.0 / active.len() as f64;
    let mut total = 0.0;
    let mut grad = Array3::zeros(shape);
    for index in active {
        let mut rows = Array2::zeros((index.len(), d));
        for (r, &(i, j)) in index.iter().enumerate() {
            rows.row_mut(r).assign(&latents.z.slice(ndarray::s![i, j, ..]));
        }
        let (value, g) = match form {
            NormForm::Univariate => kl_univariate_rows(&rows)?,
            NormForm::Multivariate => kl_multivariate_rows(&rows)?,
        };
        total += value;
        for (r, &(i, j)) in index.iter().enumerate() {
            let mut slot = grad.slice_mut(ndarray::s![i, j, ..]);
            slot.scaled_add(scale, &g.row(r));
        }
    }
    Ok((total * scale, grad))
}

//! Central finite-difference gradient checking.
//!
//! Relative error per entry is `|a - n| / max(|a|, |n|, REL_FLOOR)`, so
//! gradients smaller than the floor are compared absolutely.

use ndarray::Array2;

use crate::nn::Parameterized;

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, name: &str, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = err.max(self.max_rel_err);
            self.worst = format!("{name}: analytic {analytic:e} vs numeric {numeric:e}");
        }
    }

    pub fn merge(mut self, other: GradReport) -> GradReport {
        if other.max_rel_err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self
    }
}

pub fn numeric_gradient(x: &Array2<f64>, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut probe = x.clone();
    let mut grad = Array2::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + FD_STEP;
        let up = f(&probe);
        probe[[r, c]] = orig - FD_STEP;
        let down = f(&probe);
        probe[[r, c]] = orig;
        grad[[r, c]] = (up - down) / (2.0 * FD_STEP);
    }
    grad
}

/// Compare an analytic input gradient against finite differences of `f`.
pub fn check_input(
    name: &str,
    x: &Array2<f64>,
    analytic: &Array2<f64>,
    f: impl FnMut(&Array2<f64>) -> f64,
) -> GradReport {
    let numeric = numeric_gradient(x, f);
    let mut report = GradReport::default();
    for ((idx, &a), &n) in analytic.indexed_iter().zip(numeric.iter()) {
        report.record(&format!("{name}{idx:?}"), a, n);
    }
    report
}

/// Compare the gradients currently accumulated in `model` against finite
/// differences of `loss`. At most `max_per_tensor` evenly spaced entries are
/// probed in each tensor.
pub fn check_params<M: Parameterized>(
    model: &mut M,
    max_per_tensor: usize,
    mut loss: impl FnMut(&M) -> f64,
) -> GradReport {
    let analytic: Vec<(String, Array2<f64>)> = model
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.clone()))
        .collect();
    let mut report = GradReport::default();
    for (t, (name, grad)) in analytic.iter().enumerate() {
        let len = grad.len();
        let stride = len.div_ceil(max_per_tensor.max(1)).max(1);
        for idx in (0..len).step_by(stride) {
            let (r, c) = (idx / grad.ncols(), idx % grad.ncols());
            let orig = model.params()[t].1.value[[r, c]];
            set_entry(model, t, r, c, orig + FD_STEP);
            let up = loss(model);
            set_entry(model, t, r, c, orig - FD_STEP);
            let down = loss(model);
            set_entry(model, t, r, c, orig);
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(&format!("{name}[{r},{c}]"), grad[[r, c]], numeric);
        }
    }
    report
}

fn set_entry<M: Parameterized>(model: &mut M, tensor: usize, r: usize, c: usize, v: f64) {
    let mut params = model.params_mut();
    params[tensor].1.value[[r, c]] = v;
}

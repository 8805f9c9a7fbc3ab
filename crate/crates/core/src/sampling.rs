//! Noise-level samplers shared by noise masking and diffusion training.
//!
//! The amplitude density `p(t) = 2 cos²(πt/2)` on `[0, 1]` has CDF
//! `F(t) = t + sin(πt)/π`, inverted here by bisection.

use std::f64::consts::PI;

use rand::Rng;

/// Bisection stops once the bracket is narrower than this.
pub const QUANTILE_TOL: f64 = 1e-10;

/// Sampled times are kept inside `[T_MIN, 1 - T_MIN]`.
pub const T_MIN: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeSampling {
    Uniform,
    /// Proportional to the signal amplitude `cos²(πt/2)`.
    Amplitude,
}

impl TimeSampling {
    pub fn name(self) -> &'static str {
        match self {
            TimeSampling::Uniform => "uniform",
            TimeSampling::Amplitude => "amplitude",
        }
    }
}

pub fn amplitude_pdf(t: f64) -> f64 {
    let c = (PI * t / 2.0).cos();
    2.0 * c * c
}

pub fn amplitude_cdf(t: f64) -> f64 {
    t + (PI * t).sin() / PI
}

/// Inverse of [`amplitude_cdf`] for `u ∈ [0, 1]`.
pub fn amplitude_quantile(u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while hi - lo > QUANTILE_TOL {
        let mid = 0.5 * (lo + hi);
        if amplitude_cdf(mid) < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn sample_time<R: Rng + ?Sized>(mode: TimeSampling, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let t = match mode {
        TimeSampling::Uniform => u,
        TimeSampling::Amplitude => amplitude_quantile(u),
    };
    t.clamp(T_MIN, 1.0 - T_MIN)
}

/// Draw `n` independent per-position noise levels in `(0, 1)`.
pub fn sample_position_times<R: Rng + ?Sized>(n: usize, mode: TimeSampling, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| sample_time(mode, rng)).collect()
}

//! Variance-preserving cosine diffusion on residue latents, the v-prediction
//! tower and the representations derived from it.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use ndarray::{s, Array1, Array2, Array3, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autoencoder::LatentBatch;
use crate::error::{Error, Result};
use crate::nn::{join, BlockConfig, Linear, Param, Parameterized, StackCache, TimeEmbedding, TimeEmbeddingCache, TransformerStack};
use crate::sampling::{sample_time, TimeSampling};

/// Signal and noise coefficients at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseState {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
}

pub fn schedule(t: f64) -> Result<NoiseState> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeRange { t, range: "[0, 1]" });
    }
    let (sigma, alpha) = if t == 1.0 { (1.0, 0.0) } else { (FRAC_PI_2 * t).sin_cos() };
    Ok(NoiseState { t, alpha, sigma })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSample {
    pub z: Array2<f64>,
    pub eps: Array2<f64>,
    pub state: NoiseState,
    pub z_t: Array2<f64>,
    pub v_t: Array2<f64>,
}

pub fn make_sample(z: &Array2<f64>, t: f64, eps: &Array2<f64>) -> Result<DiffusionSample> {
    if z.dim() != eps.dim() {
        return Err(Error::Shape(format!("eps {:?} does not match z {:?}", eps.dim(), z.dim())));
    }
    let state = schedule(t)?;
    let z_t = z * state.alpha + eps * state.sigma;
    let v_t = eps * state.alpha - z * state.sigma;
    Ok(DiffusionSample {
        z: z.clone(),
        eps: eps.clone(),
        state,
        z_t,
        v_t,
    })
}

/// Draw a training time and the loss scale that makes both modes estimate
/// `E_{t~U}[cos²(πt/2) · ½‖v̂ − v‖²]`.
pub fn sample_training_t<R: Rng + ?Sized>(mode: TimeSampling, rng: &mut R) -> (f64, f64) {
    let t = sample_time(mode, rng);
    let scale = match mode {
        TimeSampling::Uniform => {
            let c = (FRAC_PI_2 * t).cos();
            c * c
        }
        TimeSampling::Amplitude => 0.5,
    };
    (t, scale)
}

/// `Σ_b scale_b · ½ Σ_residues ‖v̂ − v‖² / N` with `N` the number of residue
/// positions, and its gradient with respect to `v_hat`.
pub fn weighted_v_loss(
    v_hat: &Array3<f64>,
    v: &Array3<f64>,
    residue_mask: &ndarray::Array2<bool>,
    scales: &[f64],
) -> Result<(f64, Array3<f64>)> {
    let (b, p, _) = v.dim();
    if v_hat.dim() != v.dim() || residue_mask.dim() != (b, p) || scales.len() != b {
        return Err(Error::Shape("diffusion loss inputs disagree".into()));
    }
    let n = residue_mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::ZeroWeight);
    }
    let mut loss = 0.0;
    let mut grad = Array3::zeros(v.raw_dim());
    for ((i, j), &m) in residue_mask.indexed_iter() {
        if !m {
            continue;
        }
        let diff = &v_hat.slice(s![i, j, ..]) - &v.slice(s![i, j, ..]);
        loss += 0.5 * scales[i] * diff.dot(&diff);
        grad.slice_mut(s![i, j, ..]).assign(&(diff * (scales[i] / n as f64)));
    }
    Ok((loss / n as f64, grad))
}

/// One noised batch: per-sequence times, loss scales and noise draws.
#[derive(Debug, Clone)]
pub struct DiffusionBatch {
    pub z_t: LatentBatch,
    pub v_t: Array3<f64>,
    pub times: Vec<f64>,
    pub scales: Vec<f64>,
}

impl DiffusionBatch {
    /// Noise `z` with one time per sequence and noise `eps` (padded layout).
    pub fn new(z: &LatentBatch, times: &[f64], scales: &[f64], eps: &Array3<f64>) -> Result<Self> {
        if times.len() != z.batch_size() || scales.len() != z.batch_size() || eps.dim() != z.z.dim() {
            return Err(Error::Shape("diffusion batch inputs disagree".into()));
        }
        let mut z_t = z.clone();
        let mut v_t = Array3::zeros(z.z.raw_dim());
        for (b, &t) in times.iter().enumerate() {
            let len = z.lengths[b];
            let zb = z.z.slice(s![b, 1..=len, ..]).to_owned();
            let eb = eps.slice(s![b, 1..=len, ..]).to_owned();
            let sample = make_sample(&zb, t, &eb)?;
            z_t.z.slice_mut(s![b, 1..=len, ..]).assign(&sample.z_t);
            v_t.slice_mut(s![b, 1..=len, ..]).assign(&sample.v_t);
        }
        Ok(Self {
            z_t,
            v_t,
            times: times.to_vec(),
            scales: scales.to_vec(),
        })
    }

    /// Draw times with `mode` (one per sequence), then residue noise.
    pub fn draw<R: Rng + ?Sized>(z: &LatentBatch, mode: TimeSampling, rng: &mut R) -> Result<Self> {
        let (times, scales): (Vec<f64>, Vec<f64>) = (0..z.batch_size()).map(|_| sample_training_t(mode, rng)).unzip();
        let mut eps = Array3::zeros(z.z.raw_dim());
        for ((i, j), &m) in z.residue_mask.indexed_iter() {
            if m {
                for v in eps.slice_mut(s![i, j, ..]).iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
            }
        }
        Self::new(z, &times, &scales, &eps)
    }
}

/// Time-conditioned transformer predicting `v` for residue latents.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub bos: Param,
    pub eos: Param,
    pub time: TimeEmbedding,
    pub stack: TransformerStack,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct DiffusionCache {
    time: TimeEmbeddingCache,
    condition: Array1<f64>,
    stack: StackCache,
    head_input: Array2<f64>,
}

impl DiffusionCache {
    pub fn stack(&self) -> &StackCache {
        &self.stack
    }

    pub fn condition(&self) -> &Array1<f64> {
        &self.condition
    }
}

impl DiffusionModel {
    pub fn new<R: Rng + ?Sized>(config: &BlockConfig, rng: &mut R) -> Result<Self> {
        if !config.conditioned {
            return Err(Error::Config("diffusion stack must be time-conditioned".into()));
        }
        let d = config.channels;
        Ok(Self {
            bos: Param::normal(1, d, 1.0, rng),
            eos: Param::normal(1, d, 1.0, rng),
            time: TimeEmbedding::new(d, rng),
            stack: TransformerStack::new(config, rng)?,
            head: Linear::new(d, d, true, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.head.in_features()
    }

    pub fn config(&self) -> &BlockConfig {
        self.stack.config()
    }

    fn window(&self, residues: ArrayView2<f64>) -> Result<Array2<f64>> {
        let d = self.dim();
        if residues.ncols() != d {
            return Err(Error::Shape(format!("diffusion expects {d} channels, got {}", residues.ncols())));
        }
        let len = residues.nrows();
        let mut window = Array2::zeros((len + 2, d));
        window.row_mut(0).assign(&self.bos.value.row(0));
        window.slice_mut(s![1..=len, ..]).assign(&residues);
        window.row_mut(len + 1).assign(&self.eos.value.row(0));
        Ok(window)
    }

    /// Transformer blocks only, applied to a full `[BOS, residues.., EOS]`
    /// window.
    pub fn forward_trunk(&self, window: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        let c = self.time.embed(t)?;
        let mask = vec![true; window.nrows()];
        Ok(self.stack.forward_trunk(window, &mask, Some(c.view()))?.0)
    }

    /// `v̂` for one sequence's noised residue latents.
    pub fn forward_residues(&self, z_t: ArrayView2<f64>, t: f64) -> Result<(Array2<f64>, DiffusionCache)> {
        let window = self.window(z_t)?;
        let len = z_t.nrows();
        let (condition, time) = self.time.forward(t)?;
        let mask = vec![true; len + 2];
        let (y, stack) = self.stack.forward(&window, &mask, Some(condition.view()))?;
        let head_input = y.slice(s![1..=len, ..]).to_owned();
        let v = self.head.forward(&head_input);
        Ok((
            v,
            DiffusionCache {
                time,
                condition,
                stack,
                head_input,
            },
        ))
    }

    pub fn backward_residues(&mut self, cache: &DiffusionCache, dv: &Array2<f64>) -> Array2<f64> {
        let dhead = self.head.backward(&cache.head_input, dv);
        let len = dhead.nrows();
        let mut dwindow = Array2::zeros((len + 2, dhead.ncols()));
        dwindow.slice_mut(s![1..=len, ..]).assign(&dhead);
        let (dx, dcond) = self.stack.backward(&cache.stack, &dwindow);
        if let Some(dc) = dcond {
            self.time.backward(&cache.time, &dc);
        }
        {
            let mut g = self.bos.grad.row_mut(0);
            g += &dx.row(0);
        }
        {
            let mut g = self.eos.grad.row_mut(0);
            g += &dx.row(len + 1);
        }
        dx.slice(s![1..=len, ..]).to_owned()
    }

    /// `v̂` in the padded layout, one time per sequence.
    pub fn predict_v(&self, z_t: &LatentBatch, times: &[f64]) -> Result<Array3<f64>> {
        Ok(self.predict_v_with_cache(z_t, times)?.0)
    }

    fn predict_v_with_cache(&self, z_t: &LatentBatch, times: &[f64]) -> Result<(Array3<f64>, Vec<DiffusionCache>)> {
        if times.len() != z_t.batch_size() {
            return Err(Error::Shape(format!("{} times for {} sequences", times.len(), z_t.batch_size())));
        }
        let mut out = Array3::zeros(z_t.z.raw_dim());
        let mut caches = Vec::with_capacity(times.len());
        for (b, &t) in times.iter().enumerate() {
            let len = z_t.lengths[b];
            let (v, cache) = self.forward_residues(z_t.residues(b), t)?;
            out.slice_mut(s![b, 1..=len, ..]).assign(&v);
            caches.push(cache);
        }
        Ok((out, caches))
    }

    /// Amplitude-weighted v-prediction loss of a noised batch.
    pub fn loss(&self, batch: &DiffusionBatch) -> Result<f64> {
        let v_hat = self.predict_v(&batch.z_t, &batch.times)?;
        Ok(weighted_v_loss(&v_hat, &batch.v_t, &batch.z_t.residue_mask, &batch.scales)?.0)
    }

    /// Loss of a noised batch, accumulating its gradient into the parameters.
    pub fn loss_step(&mut self, batch: &DiffusionBatch) -> Result<f64> {
        let (v_hat, caches) = self.predict_v_with_cache(&batch.z_t, &batch.times)?;
        let (loss, grad) = weighted_v_loss(&v_hat, &batch.v_t, &batch.z_t.residue_mask, &batch.scales)?;
        for (b, cache) in caches.iter().enumerate() {
            let len = batch.z_t.lengths[b];
            let dv = grad.slice(s![b, 1..=len, ..]).to_owned();
            self.backward_residues(cache, &dv);
        }
        Ok(loss)
    }

    /// `v̄_t(z) = v̂(cos(πt/2) z, t)`; consumes no randomness.
    pub fn mean_representation(&self, z: &LatentBatch, t: f64) -> Result<LatentBatch> {
        let state = schedule(t)?;
        let mut input = z.clone();
        input.z *= state.alpha;
        let v = self.predict_v(&input, &vec![t; z.batch_size()])?;
        Ok(LatentBatch {
            z: v,
            residue_mask: z.residue_mask.clone(),
            lengths: z.lengths.clone(),
        })
    }

    /// `v̄_t(z) + sin(πt/2) z`, which is exactly `v̄_0(z)` at `t = 0`.
    pub fn score_representation(&self, z: &LatentBatch, t: f64) -> Result<LatentBatch> {
        let mut rep = self.mean_representation(z, t)?;
        if t == 0.0 {
            return Ok(rep);
        }
        let state = schedule(t)?;
        rep.z.scaled_add(state.sigma, &z.z);
        Ok(rep)
    }

    /// `−ε̂ / sin(πt/2)` with `ε̂ = sin(πt/2) z_t + cos(πt/2) v̂(z_t, t)`.
    pub fn tweedie_score(&self, z_t: &LatentBatch, t: f64) -> Result<LatentBatch> {
        let state = schedule(t)?;
        if state.sigma == 0.0 {
            return Err(Error::SingularScore);
        }
        let v = self.predict_v(z_t, &vec![t; z_t.batch_size()])?;
        Ok(LatentBatch {
            z: tweedie_from_v(&z_t.z, &v, state),
            residue_mask: z_t.residue_mask.clone(),
            lengths: z_t.lengths.clone(),
        })
    }
}

/// Score from a velocity prediction: `−(σ z_t + α v̂) / σ`.
pub fn tweedie_from_v(z_t: &Array3<f64>, v_hat: &Array3<f64>, state: NoiseState) -> Array3<f64> {
    let eps_hat = z_t * state.sigma + v_hat * state.alpha;
    eps_hat / -state.sigma
}

impl Parameterized for DiffusionModel {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "bos"), &self.bos));
        out.push((join(prefix, "eos"), &self.eos));
        self.time.collect_params(&join(prefix, "time"), out);
        self.stack.collect_params(&join(prefix, "stack"), out);
        self.head.collect_params(&join(prefix, "head"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "bos"), &mut self.bos));
        out.push((join(prefix, "eos"), &mut self.eos));
        self.time.collect_params_mut(&join(prefix, "time"), out);
        self.stack.collect_params_mut(&join(prefix, "stack"), out);
        self.head.collect_params_mut(&join(prefix, "head"), out);
    }
}

/// Write pooled representations as tab-separated rows
/// `seq_id  t  r0 .. r{d-1}` under a header line.
pub fn write_pooled<W: Write>(out: &mut W, ids: &[String], t: Option<f64>, pooled: &Array2<f64>) -> Result<()> {
    if ids.len() != pooled.nrows() {
        return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), pooled.nrows())));
    }
    write!(out, "seq_id\tt")?;
    for k in 0..pooled.ncols() {
        write!(out, "\tr{k}")?;
    }
    writeln!(out)?;
    let t_field = t.map_or_else(|| "NA".to_string(), |t| format!("{t}"));
    for (id, row) in ids.iter().zip(pooled.rows()) {
        write!(out, "{id}\t{t_field}")?;
        for v in row {
            write!(out, "\t{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

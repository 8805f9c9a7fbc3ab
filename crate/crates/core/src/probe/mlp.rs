use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Param, Parameterized};
use crate::training::{AdamW, AdamWConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Regression,
    /// Classification into `k` classes labelled `0..k`.
    Classification(usize),
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(TaskKind::Regression),
            "binary" => Ok(TaskKind::Classification(2)),
            _ => match s.strip_prefix("multiclass:").map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 2 => Ok(TaskKind::Classification(k)),
                _ => Err(Error::Config(format!(
                    "unknown task kind '{s}' (regression | binary | multiclass:K)"
                ))),
            },
        }
    }

    pub fn outputs(self) -> usize {
        match self {
            TaskKind::Regression => 1,
            TaskKind::Classification(k) => k,
        }
    }
}

/// Optimization settings for the probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRecipe {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for ProbeRecipe {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            batch_size: 64,
            patience: 10,
            max_epochs: 200,
        }
    }
}

impl ProbeRecipe {
    pub fn describe(&self) -> String {
        format!(
            "adamw lr={} wd={} batch={} patience={} max_epochs={} gelu standardized-inputs",
            self.learning_rate, self.weight_decay, self.batch_size, self.patience, self.max_epochs
        )
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Single-hidden-layer MLP with hidden width equal to its input width.
#[derive(Debug, Clone)]
pub struct MlpProbe {
    pub fc1: Linear,
    pub fc2: Linear,
    pub kind: TaskKind,
    input_mean: Array1<f64>,
    input_scale: Array1<f64>,
    target_mean: f64,
    target_scale: f64,
}

struct Forward {
    x: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
    out: Array2<f64>,
}

impl MlpProbe {
    pub fn hidden_width(&self) -> usize {
        self.fc1.out_features()
    }

    fn standardize(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.input_mean) / &self.input_scale
    }

    fn forward(&self, x: Array2<f64>) -> Forward {
        let pre = self.fc1.forward(&x);
        let hidden = pre.mapv(gelu);
        let out = self.fc2.forward(&hidden);
        Forward { x, pre, hidden, out }
    }

    /// Mean loss of standardized inputs and its gradient into the parameters.
    fn loss_and_backward(&mut self, x: Array2<f64>, y: &[f64], backward: bool) -> f64 {
        let f = self.forward(x);
        let n = y.len() as f64;
        let mut dout = Array2::zeros(f.out.raw_dim());
        let mut loss = 0.0;
        match self.kind {
            TaskKind::Regression => {
                for (i, &t) in y.iter().enumerate() {
                    let target = (t - self.target_mean) / self.target_scale;
                    let d = f.out[[i, 0]] - target;
                    loss += d * d / n;
                    dout[[i, 0]] = 2.0 * d / n;
                }
            }
            TaskKind::Classification(_) => {
                for (i, &t) in y.iter().enumerate() {
                    let row = f.out.row(i);
                    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let exps = row.mapv(|v| (v - max).exp());
                    let z = exps.sum();
                    let c = t as usize;
                    loss += (z.ln() + max - row[c]) / n;
                    for k in 0..row.len() {
                        dout[[i, k]] = (exps[k] / z - if k == c { 1.0 } else { 0.0 }) / n;
                    }
                }
            }
        }
        if backward {
            let dhidden = self.fc2.backward(&f.hidden, &dout);
            let dpre = dhidden * &f.pre.mapv(gelu_grad);
            self.fc1.backward(&f.x, &dpre);
        }
        loss
    }

    /// Mean training-objective value on raw features.
    pub fn loss(&mut self, x: &Array2<f64>, y: &[f64]) -> f64 {
        let xs = self.standardize(x);
        self.loss_and_backward(xs, y, false)
    }

    /// Regression predictions in label units, or class scores.
    pub fn predict_raw(&self, x: &Array2<f64>) -> Array2<f64> {
        let out = self.forward(self.standardize(x)).out;
        match self.kind {
            TaskKind::Regression => out.mapv(|v| v * self.target_scale + self.target_mean),
            TaskKind::Classification(_) => out,
        }
    }

    pub fn predict_values(&self, x: &Array2<f64>) -> Vec<f64> {
        self.predict_raw(x).column(0).to_vec()
    }

    pub fn predict_classes(&self, x: &Array2<f64>) -> Vec<usize> {
        self.predict_raw(x)
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

impl Parameterized for MlpProbe {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.fc1.collect_params(&join(prefix, "fc1"), out);
        self.fc2.collect_params(&join(prefix, "fc2"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.fc1.collect_params_mut(&join(prefix, "fc1"), out);
        self.fc2.collect_params_mut(&join(prefix, "fc2"), out);
    }
}

fn check_labels(y: &[f64], kind: TaskKind) -> Result<()> {
    for &v in y {
        if !v.is_finite() {
            return Err(Error::Config(format!("label {v} is not finite")));
        }
        if let TaskKind::Classification(k) = kind {
            if v < 0.0 || v.fract() != 0.0 || v as usize >= k {
                return Err(Error::Config(format!("class label {v} outside 0..{k}")));
            }
        }
    }
    Ok(())
}

/// Outcome of probe training.
#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub probe: MlpProbe,
    pub epochs: usize,
    pub warnings: Vec<String>,
}

/// Train a probe on `(x, y)` with early stopping on `valid` when given
/// (otherwise on the training loss).
pub fn train_probe(
    x: &Array2<f64>,
    y: &[f64],
    valid: Option<(&Array2<f64>, &[f64])>,
    kind: TaskKind,
    seed: u64,
    recipe: &ProbeRecipe,
) -> Result<TrainedProbe> {
    let n = x.nrows();
    if n != y.len() {
        return Err(Error::Shape(format!("{n} feature rows for {} labels", y.len())));
    }
    if n < 2 {
        return Err(Error::InsufficientSample { got: n, need: 2 });
    }
    check_labels(y, kind)?;
    let mut warnings = Vec::new();
    if let TaskKind::Classification(_) = kind {
        let first = y[0];
        if y.iter().all(|&v| v == first) {
            return Err(Error::Config("classification probe needs at least 2 classes in training".into()));
        }
    }
    if let Some((vx, vy)) = valid {
        if vx.nrows() != vy.len() || vx.ncols() != x.ncols() {
            return Err(Error::Shape("validation features disagree with training".into()));
        }
        check_labels(vy, kind)?;
    }

    let d = x.ncols();
    let input_mean = x.mean_axis(Axis(0)).unwrap();
    let input_scale = x
        .var_axis(Axis(0), 0.0)
        .mapv(|v| if v > 1e-12 { v.sqrt() } else { 1.0 });
    let (target_mean, target_scale) = match kind {
        TaskKind::Regression => {
            let m = y.iter().sum::<f64>() / n as f64;
            let var = y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            if var <= 1e-24 {
                warnings.push("regression labels are all equal".to_string());
                (m, 1.0)
            } else {
                (m, var.sqrt())
            }
        }
        TaskKind::Classification(_) => (0.0, 1.0),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = MlpProbe {
        fc1: Linear::new(d, d, true, &mut rng),
        fc2: Linear::new(d, kind.outputs(), true, &mut rng),
        kind,
        input_mean,
        input_scale,
        target_mean,
        target_scale,
    };
    let mut opt = AdamW::for_model(
        AdamWConfig {
            learning_rate: recipe.learning_rate,
            weight_decay: recipe.weight_decay,
            ..AdamWConfig::default()
        },
        &probe,
    );

    let xs = probe.standardize(x);
    let mut best = f64::INFINITY;
    let mut best_probe = probe.clone();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = 0;
    for _ in 0..recipe.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        for chunk in order.chunks(recipe.batch_size.max(1)) {
            let bx = xs.select(Axis(0), chunk);
            let by: Vec<f64> = chunk.iter().map(|&i| y[i]).collect();
            probe.zero_grad();
            probe.loss_and_backward(bx, &by, true);
            opt.update(&mut probe)?;
        }
        let score = match valid {
            Some((vx, vy)) => probe.loss(vx, vy),
            None => probe.loss(x, y),
        };
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("probe loss at epoch {epochs}")));
        }
        if score < best {
            best = score;
            best_probe = probe.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= recipe.patience {
                break;
            }
        }
    }
    Ok(TrainedProbe {
        probe: best_probe,
        epochs,
        warnings,
    })
}

//! Frozen-backbone probing: pooled features, small MLP predictors, metrics
//! and multi-seed aggregation.
//!
//! Task files are tab-separated with a header naming the columns, either
//! `sequence label split` or `sequence sequence_b label split`. `split` is
//! one of `train`, `valid`, `test`.

mod metrics;
mod mlp;

use std::io::Write;

use ndarray::{concatenate, Array2, Axis};

pub use metrics::{accuracy, average_ranks, mean_std, spearman_rho};
pub use mlp::{train_probe, MlpProbe, ProbeRecipe, TaskKind, TrainedProbe};

use crate::autoencoder::{Encoder, LatentBatch};
use crate::diffusion::DiffusionModel;
use crate::error::{Error, Result};
use crate::seqdata::{pad_batch_to, tokenize_with_limit, TokenSequence, MAX_RESIDUES};
use crate::training::{restore_diffusion, restore_encoder, Checkpoint, CheckpointKind};

pub const DEFAULT_SEEDS: usize = 5;
const FEATURE_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Representation {
    Encoder,
    Diffusion(f64),
}

impl Representation {
    pub fn tag(&self) -> String {
        match self {
            Representation::Encoder => "encoder".into(),
            Representation::Diffusion(t) => format!("diffusion(t={t})"),
        }
    }

    pub fn t(&self) -> Option<f64> {
        match self {
            Representation::Encoder => None,
            Representation::Diffusion(t) => Some(*t),
        }
    }

    /// `encoder`, `diffusion` (t = 0) or `diffusion:<t>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Representation::Encoder),
            "diffusion" => Ok(Representation::Diffusion(0.0)),
            _ => {
                let t = s
                    .strip_prefix("diffusion:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown representation '{s}'")))?;
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::TimeRange { t, range: "[0, 1]" });
                }
                Ok(Representation::Diffusion(t))
            }
        }
    }
}

/// A frozen encoder, optionally with a diffusion tower on its latents.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub encoder: Encoder,
    pub diffusion: Option<DiffusionModel>,
}

impl Backbone {
    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        match checkpoint.kind {
            CheckpointKind::Autoencoder => Ok(Self {
                encoder: restore_encoder(checkpoint)?.1,
                diffusion: None,
            }),
            CheckpointKind::Diffusion => {
                let (_, encoder, diffusion) = restore_diffusion(checkpoint)?;
                Ok(Self {
                    encoder,
                    diffusion: Some(diffusion),
                })
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    /// Per-residue vectors for a batch of sequences.
    pub fn latents(&self, seqs: &[TokenSequence], representation: Representation) -> Result<LatentBatch> {
        let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let batch = pad_batch_to(seqs, longest + 2)?;
        let z = self.encoder.encode(&batch)?;
        match representation {
            Representation::Encoder => Ok(z),
            Representation::Diffusion(t) => {
                let diffusion = self.diffusion.as_ref().ok_or_else(|| {
                    Error::Config("diffusion representation needs a diffusion checkpoint".into())
                })?;
                diffusion.score_representation(&z, t)
            }
        }
    }

    /// Mean-pooled vectors, one row per sequence.
    pub fn pooled(&self, seqs: &[TokenSequence], representation: Representation) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((seqs.len(), self.dim()));
        for (c, chunk) in seqs.chunks(FEATURE_CHUNK).enumerate() {
            let pooled = mean_pool(&self.latents(chunk, representation)?)?;
            let start = c * FEATURE_CHUNK;
            out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&pooled);
        }
        Ok(out)
    }
}

/// Mean over residue positions of each row.
pub fn mean_pool(latents: &LatentBatch) -> Result<Array2<f64>> {
    let (b, _, d) = latents.z.dim();
    let mut out = Array2::zeros((b, d));
    for i in 0..b {
        let mut count = 0usize;
        let mut acc = out.row_mut(i);
        for (p, &m) in latents.residue_mask.row(i).iter().enumerate() {
            if m {
                acc += &latents.z.slice(ndarray::s![i, p, ..]);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::InsufficientSample { got: 0, need: 1 });
        }
        acc /= count as f64;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRecord {
    pub sequence: TokenSequence,
    pub sequence_b: Option<TokenSequence>,
    pub label: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub kind: TaskKind,
    pub paired: bool,
    pub records: Vec<ProbeRecord>,
}

impl ProbeDataset {
    pub fn parse(text: &str, kind: TaskKind) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty task file".into(),
        })?;
        let columns: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
        let paired = match columns.as_slice() {
            ["sequence", "label", "split"] => false,
            ["sequence", "sequence_b", "label", "split"] => true,
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("unexpected header '{header}'"),
                })
            }
        };
        let mut records = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            if fields.len() != columns.len() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {} fields, found {}", columns.len(), fields.len()),
                });
            }
            let n = fields.len();
            let at = |e: Error| match e {
                Error::Parse { msg, .. } => Error::Parse { line: line_no, msg },
                other => Error::Parse {
                    line: line_no,
                    msg: other.to_string(),
                },
            };
            let sequence = tokenize_with_limit(fields[0], MAX_RESIDUES).map_err(at)?;
            let sequence_b = if paired {
                Some(tokenize_with_limit(fields[1], MAX_RESIDUES).map_err(at)?)
            } else {
                None
            };
            let label: f64 = fields[n - 2].parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("label '{}' is not a number", fields[n - 2]),
            })?;
            if !label.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "label is not finite".into(),
                });
            }
            if let TaskKind::Classification(k) = kind {
                if label < 0.0 || label.fract() != 0.0 || label as usize >= k {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("class label {label} outside 0..{k}"),
                    });
                }
            }
            let split = Split::parse(fields[n - 1]).ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("unknown split '{}'", fields[n - 1]),
            })?;
            records.push(ProbeRecord {
                sequence,
                sequence_b,
                label,
                split,
            });
        }
        Ok(Self { kind, paired, records })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.records[i].label).collect()
    }
}

/// Pooled features for every record; pairs concatenate both proteins.
pub fn build_features(dataset: &ProbeDataset, backbone: &Backbone, representation: Representation) -> Result<Array2<f64>> {
    let first: Vec<TokenSequence> = dataset.records.iter().map(|r| r.sequence.clone()).collect();
    let a = backbone.pooled(&first, representation)?;
    if !dataset.paired {
        return Ok(a);
    }
    let second = dataset
        .records
        .iter()
        .map(|r| {
            r.sequence_b
                .clone()
                .ok_or_else(|| Error::Config("pair task record without a second sequence".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let b = backbone.pooled(&second, representation)?;
    Ok(concatenate![Axis(1), a, b])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub task: String,
    pub representation: Representation,
    pub metric: &'static str,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub recipe: String,
    pub warnings: Vec<String>,
}

pub fn metric_name(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Regression => "spearman",
        TaskKind::Classification(_) => "accuracy",
    }
}

/// Train one probe per seed on precomputed features and score it on the
/// test split.
pub fn evaluate_features(
    task: &str,
    features: &Array2<f64>,
    dataset: &ProbeDataset,
    representation: Representation,
    seeds: &[u64],
    recipe: &ProbeRecipe,
) -> Result<ProbeResult> {
    if features.nrows() != dataset.records.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} records",
            features.nrows(),
            dataset.records.len()
        )));
    }
    if seeds.is_empty() {
        return Err(Error::Config("at least one probe seed is required".into()));
    }
    let train = dataset.indices(Split::Train);
    let valid = dataset.indices(Split::Valid);
    let test = dataset.indices(Split::Test);
    if test.is_empty() {
        return Err(Error::InsufficientSample { got: 0, need: 1 });
    }
    let x_train = features.select(Axis(0), &train);
    let y_train = dataset.labels(&train);
    let x_valid = features.select(Axis(0), &valid);
    let y_valid = dataset.labels(&valid);
    let x_test = features.select(Axis(0), &test);
    let y_test = dataset.labels(&test);
    let valid_pair = (!valid.is_empty()).then_some((&x_valid, y_valid.as_slice()));

    let mut values = Vec::with_capacity(seeds.len());
    let mut warnings = Vec::new();
    for &seed in seeds {
        let trained = train_probe(&x_train, &y_train, valid_pair, dataset.kind, seed, recipe)?;
        for w in trained.warnings {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        let value = match dataset.kind {
            TaskKind::Regression => spearman_rho(&trained.probe.predict_values(&x_test), &y_test)?,
            TaskKind::Classification(_) => {
                let target: Vec<usize> = y_test.iter().map(|&v| v as usize).collect();
                accuracy(&trained.probe.predict_classes(&x_test), &target)?
            }
        };
        values.push(value);
    }
    if valid.is_empty() {
        warnings.push("no validation split; early stopping used the training loss".into());
    }
    let (mean, std) = mean_std(&values);
    Ok(ProbeResult {
        task: task.to_string(),
        representation,
        metric: metric_name(dataset.kind),
        seeds: seeds.to_vec(),
        values,
        mean,
        std,
        recipe: recipe.describe(),
        warnings,
    })
}

/// Probe seeds `base, base+1, ..`.
pub fn probe_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

pub fn evaluate(
    task: &str,
    backbone: &Backbone,
    dataset: &ProbeDataset,
    representation: Representation,
    seeds: &[u64],
    recipe: &ProbeRecipe,
) -> Result<ProbeResult> {
    let features = build_features(dataset, backbone, representation)?;
    evaluate_features(task, &features, dataset, representation, seeds, recipe)
}

/// One diffusion-representation evaluation per grid value.
pub fn evaluate_sweep(
    task: &str,
    backbone: &Backbone,
    dataset: &ProbeDataset,
    t_grid: &[f64],
    seeds: &[u64],
    recipe: &ProbeRecipe,
) -> Result<Vec<ProbeResult>> {
    if t_grid.is_empty() {
        return Err(Error::Config("empty t grid".into()));
    }
    t_grid
        .iter()
        .map(|&t| evaluate(task, backbone, dataset, Representation::Diffusion(t), seeds, recipe))
        .collect()
}

/// `start:stop:step` (inclusive of `stop` when it lies on the grid) or a
/// comma-separated list.
pub fn parse_t_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("invalid t grid '{text}'"));
    let values: Vec<f64> = if text.contains(':') {
        let parts: Vec<f64> = text
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [start, stop, step] = parts[..] else {
            return Err(bad());
        };
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
            .collect()
    } else {
        text.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if values.is_empty() {
        return Err(bad());
    }
    for &t in &values {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeRange { t, range: "[0, 1]" });
        }
    }
    Ok(values)
}

fn t_field(r: &Representation) -> String {
    r.t().map_or_else(|| "NA".into(), |t| format!("{t}"))
}

/// One row per (result, seed).
pub fn write_results<W: Write>(out: &mut W, results: &[ProbeResult]) -> Result<()> {
    writeln!(out, "task\trepresentation\tt\tseed\tmetric\tvalue")?;
    for r in results {
        for (seed, v) in r.seeds.iter().zip(&r.values) {
            writeln!(
                out,
                "{}\t{}\t{}\t{seed}\t{}\t{v}",
                r.task,
                r.representation.tag(),
                t_field(&r.representation),
                r.metric
            )?;
        }
    }
    Ok(())
}

/// One row per result with mean and standard deviation over seeds.
pub fn write_aggregate<W: Write>(out: &mut W, results: &[ProbeResult]) -> Result<()> {
    writeln!(out, "task\trepresentation\tt\tmetric\tmean\tstd\tseeds\trecipe")?;
    for r in results {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.task,
            r.representation.tag(),
            t_field(&r.representation),
            r.metric,
            r.mean,
            r.std,
            r.values.len(),
            r.recipe
        )?;
    }
    Ok(())
}

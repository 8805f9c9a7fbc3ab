//! `lsd`: data preparation, training, probing and analysis from the shell.
//!
//! Every command writes its outputs plus a `manifest.txt` into `--out`.
//! Failures print one line `error[<class>]: <message>` to stderr and exit
//! with the class's code (see [`Class`]).

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use lsd_core::analysis::{attention_fractions, context_peaks_early, export_embeddings, write_fractions};
use lsd_core::probe::{
    evaluate, evaluate_sweep, parse_t_grid, probe_seeds, write_aggregate, write_results, Backbone, ProbeDataset,
    ProbeRecipe, Representation, TaskKind, DEFAULT_SEEDS,
};
use lsd_core::seqdata::{filter_dataset, parse_fasta, write_fasta, TokenSequence};
use lsd_core::training::{AutoencoderTrainer, Checkpoint, CheckpointKind, DiffusionTrainer, TrainConfig};
use lsd_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Other = 1,
    Usage = 2,
    Config = 3,
    Io = 4,
    Data = 5,
    Checkpoint = 6,
    Numeric = 7,
}

impl Class {
    fn name(self) -> &'static str {
        match self {
            Class::Other => "other",
            Class::Usage => "usage",
            Class::Config => "config",
            Class::Io => "io",
            Class::Data => "data",
            Class::Checkpoint => "checkpoint",
            Class::Numeric => "numeric",
        }
    }
}

struct Failure {
    class: Class,
    msg: String,
}

type CliResult<T> = std::result::Result<T, Failure>;

fn fail(class: Class, msg: impl Into<String>) -> Failure {
    Failure { class, msg: msg.into() }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let class = match &e {
            Error::Config(_) | Error::TimeRange { .. } => Class::Config,
            Error::Io(_) => Class::Io,
            Error::Parse { .. } | Error::NonCanonical { .. } | Error::Length { .. } | Error::InsufficientSample { .. } => {
                Class::Data
            }
            Error::Checkpoint(_) => Class::Checkpoint,
            Error::NonFinite(_)
            | Error::Divergence { .. }
            | Error::Singular(_)
            | Error::SingularScore
            | Error::Metric(_)
            | Error::ZeroWeight => Class::Numeric,
            Error::Shape(_) | Error::AllKeysMasked(_) => Class::Other,
        };
        fail(class, e.to_string())
    }
}

trait Context<T> {
    fn class(self, class: Class) -> CliResult<T>;
}

impl<T> Context<T> for lsd_core::Result<T> {
    fn class(self, class: Class) -> CliResult<T> {
        self.map_err(|e| fail(class, e.to_string()))
    }
}

#[derive(Parser)]
#[command(name = "lsd", version, about = "Latent space diffusion for protein sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key/value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for all randomness in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a FASTA file to canonical sequences within the length limit.
    PrepareData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Train an autoencoder.
    TrainAe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from an autoencoder checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a diffusion tower on a frozen encoder.
    TrainDiff {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Autoencoder checkpoint providing the encoder.
        #[arg(long, required_unless_present = "resume")]
        encoder: Option<PathBuf>,
        /// Continue from a diffusion checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Probe one representation on a task file.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskArgs,
        /// encoder | diffusion | diffusion:<t>
        #[arg(long, default_value = "encoder")]
        representation: String,
    },
    /// Probe diffusion representations over a grid of t.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskArgs,
        /// start:stop:step or a comma-separated list.
        #[arg(long, default_value = "0:0.95:0.05")]
        t_grid: String,
    },
    /// Per-layer context/local/edge attention fractions.
    AnalyzeAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "encoder")]
        representation: String,
    },
    /// Per-residue vectors for external visualization.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "encoder")]
        representation: String,
    },
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task file with columns sequence[, sequence_b], label, split.
    #[arg(long)]
    task: PathBuf,
    /// regression | binary | multiclass:K
    #[arg(long)]
    kind: String,
    /// Task name in result tables (defaults to the task file stem).
    #[arg(long)]
    name: Option<String>,
}

/// Collects input/output hashes and writes `manifest.txt` last.
struct Run {
    out: PathBuf,
    lines: Vec<String>,
    outputs: Vec<String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| fail(Class::Io, format!("cannot read '{}': {e}", path.display())))
}

impl Run {
    fn new(command: &str, common: &Common) -> Self {
        let mut lines = vec![format!("command = {command}")];
        if let Some(seed) = common.seed {
            lines.push(format!("seed = {seed}"));
        }
        for s in &common.set {
            lines.push(format!("override = {s}"));
        }
        Self {
            out: common.out.clone(),
            lines,
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, role: &str, path: &Path, bytes: &[u8]) {
        self.lines.push(format!(
            "input.{role} = {} sha256:{}",
            path.display(),
            hex(&Sha256::digest(bytes))
        ));
    }

    fn read(&mut self, role: &str, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = read_input(path)?;
        self.input(role, path, &bytes);
        Ok(bytes)
    }

    fn setting(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("{key} = {value}"));
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        fs::create_dir_all(&self.out)
            .map_err(|e| fail(Class::Io, format!("cannot create '{}': {e}", self.out.display())))?;
        let path = self.out.join(name);
        fs::write(&path, bytes).map_err(|e| fail(Class::Io, format!("cannot write '{}': {e}", path.display())))?;
        self.outputs
            .push(format!("output.{name} = sha256:{}", hex(&Sha256::digest(bytes))));
        Ok(())
    }

    fn finish(mut self) -> CliResult<()> {
        let mut text = self.lines.join("\n");
        text.push('\n');
        for o in &self.outputs {
            text.push_str(o);
            text.push('\n');
        }
        self.outputs.clear();
        self.write("manifest.txt", text.as_bytes())
    }
}

fn train_config(run: &mut Run, common: &Common, base: Option<TrainConfig>) -> CliResult<TrainConfig> {
    let mut config = match (&common.config, base) {
        (Some(path), _) => {
            let bytes = run.read("config", path)?;
            let text = String::from_utf8(bytes).map_err(|_| fail(Class::Config, "config file is not UTF-8"))?;
            TrainConfig::parse(&text).class(Class::Config)?
        }
        (None, Some(base)) => base,
        (None, None) => TrainConfig::parse("").class(Class::Config)?,
    };
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| fail(Class::Usage, format!("--set expects KEY=VALUE, got '{s}'")))?;
        config.set(k.trim(), v.trim()).class(Class::Config)?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate().class(Class::Config)?;
    Ok(config)
}

fn record_config(run: &mut Run, config: &TrainConfig) {
    for line in config.to_text().lines() {
        run.lines.push(format!("config.{line}"));
    }
}

fn load_sequences(run: &mut Run, path: &Path, max_length: usize) -> CliResult<Vec<TokenSequence>> {
    let bytes = run.read("data", path)?;
    let records = parse_fasta(BufReader::new(bytes.as_slice()))?;
    let (kept, dropped) = filter_dataset(&records, max_length);
    if dropped > 0 {
        eprintln!("dropped {dropped} of {} sequences (non-canonical or longer than {max_length})", records.len());
    }
    if kept.is_empty() {
        return Err(fail(Class::Data, format!("no usable sequences in '{}'", path.display())));
    }
    Ok(kept)
}

fn load_checkpoint(run: &mut Run, role: &str, path: &Path) -> CliResult<Checkpoint> {
    let bytes = run.read(role, path)?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

/// Probe settings: `probe.{learning_rate, weight_decay, batch_size,
/// patience, max_epochs, seeds}`.
fn probe_settings(run: &mut Run, common: &Common) -> CliResult<(ProbeRecipe, usize)> {
    let mut recipe = ProbeRecipe::default();
    let mut seeds = DEFAULT_SEEDS;
    let mut entries: Vec<(String, String)> = Vec::new();
    if let Some(path) = &common.config {
        let text = String::from_utf8(run.read("config", path)?).map_err(|_| fail(Class::Config, "config file is not UTF-8"))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fail(Class::Config, format!("line {}: expected 'key = value'", i + 1)))?;
            entries.push((k.trim().into(), v.trim().into()));
        }
    }
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| fail(Class::Usage, format!("--set expects KEY=VALUE, got '{s}'")))?;
        entries.push((k.trim().into(), v.trim().into()));
    }
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> CliResult<T> {
        v.parse().map_err(|_| fail(Class::Config, format!("invalid value '{v}' for '{k}'")))
    }
    for (k, v) in &entries {
        match k.as_str() {
            "probe.learning_rate" => recipe.learning_rate = num(k, v)?,
            "probe.weight_decay" => recipe.weight_decay = num(k, v)?,
            "probe.batch_size" => recipe.batch_size = num(k, v)?,
            "probe.patience" => recipe.patience = num(k, v)?,
            "probe.max_epochs" => recipe.max_epochs = num(k, v)?,
            "probe.seeds" => seeds = num(k, v)?,
            _ => return Err(fail(Class::Config, format!("unknown key '{k}'"))),
        }
    }
    if seeds == 0 || recipe.batch_size == 0 || recipe.max_epochs == 0 {
        return Err(fail(Class::Config, "probe.seeds, probe.batch_size and probe.max_epochs must be positive"));
    }
    run.setting("probe.recipe", recipe.describe());
    run.setting("probe.seeds", seeds);
    Ok((recipe, seeds))
}

fn representation(s: &str) -> CliResult<Representation> {
    Representation::parse(s).class(Class::Usage)
}

fn task_inputs(run: &mut Run, task: &TaskArgs) -> CliResult<(Backbone, ProbeDataset, String)> {
    let kind = TaskKind::parse(&task.kind).class(Class::Usage)?;
    let ckpt = load_checkpoint(run, "checkpoint", &task.checkpoint)?;
    let text = String::from_utf8(run.read("task", &task.task)?)
        .map_err(|_| fail(Class::Data, format!("'{}' is not UTF-8", task.task.display())))?;
    let dataset = ProbeDataset::parse(&text, kind)?;
    let name = task.name.clone().unwrap_or_else(|| {
        task.task
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "task".into())
    });
    Ok((Backbone::from_checkpoint(&ckpt)?, dataset, name))
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::PrepareData { common, input } => {
            let mut run = Run::new("prepare-data", &common);
            let config = train_config(&mut run, &common, None)?;
            run.setting("data.max_length", config.max_length);
            let seqs = load_sequences(&mut run, &input, config.max_length)?;
            let mut out = Vec::new();
            write_fasta(&mut out, &seqs)?;
            run.write("sequences.fasta", &out)?;
            run.finish()
        }
        Command::TrainAe { common, data, resume } => {
            let mut run = Run::new("train-ae", &common);
            let (mut trainer, config) = match resume {
                Some(path) => {
                    let ckpt = load_checkpoint(&mut run, "resume", &path)?;
                    if ckpt.kind != CheckpointKind::Autoencoder {
                        return Err(fail(Class::Checkpoint, "--resume expects an autoencoder checkpoint"));
                    }
                    let (config, ckpt) = extend(&mut run, &common, ckpt)?;
                    let seqs = load_sequences(&mut run, &data, config.max_length)?;
                    (AutoencoderTrainer::resume(&ckpt, seqs)?, config)
                }
                None => {
                    let config = train_config(&mut run, &common, None)?;
                    let seqs = load_sequences(&mut run, &data, config.max_length)?;
                    (AutoencoderTrainer::new(&config, seqs)?, config)
                }
            };
            record_config(&mut run, &config);
            let mut metrics = Vec::new();
            let outcome = trainer.run(&mut metrics);
            run.write("metrics.tsv", &metrics)?;
            outcome?;
            run.write("autoencoder.ckpt", &trainer.checkpoint().to_bytes())?;
            run.finish()
        }
        Command::TrainDiff {
            common,
            data,
            encoder,
            resume,
        } => {
            let mut run = Run::new("train-diff", &common);
            let (mut trainer, config) = match resume {
                Some(path) => {
                    let ckpt = load_checkpoint(&mut run, "resume", &path)?;
                    if ckpt.kind != CheckpointKind::Diffusion {
                        return Err(fail(Class::Checkpoint, "--resume expects a diffusion checkpoint"));
                    }
                    let (config, ckpt) = extend(&mut run, &common, ckpt)?;
                    let seqs = load_sequences(&mut run, &data, config.max_length)?;
                    (DiffusionTrainer::resume(&ckpt, seqs)?, config)
                }
                None => {
                    let path = encoder.ok_or_else(|| fail(Class::Usage, "--encoder is required"))?;
                    let ae = load_checkpoint(&mut run, "encoder", &path)?;
                    let config = train_config(&mut run, &common, None)?;
                    let seqs = load_sequences(&mut run, &data, config.max_length)?;
                    (DiffusionTrainer::new(&config, &ae, seqs)?, config)
                }
            };
            record_config(&mut run, &config);
            let mut metrics = Vec::new();
            let outcome = trainer.run(&mut metrics);
            run.write("metrics.tsv", &metrics)?;
            outcome?;
            run.write("diffusion.ckpt", &trainer.checkpoint().to_bytes())?;
            run.finish()
        }
        Command::Probe {
            common,
            task,
            representation: rep,
        } => {
            let rep = representation(&rep)?;
            let mut run = Run::new("probe", &common);
            let (recipe, count) = probe_settings(&mut run, &common)?;
            let (backbone, dataset, name) = task_inputs(&mut run, &task)?;
            run.setting("representation", rep.tag());
            let result = evaluate(&name, &backbone, &dataset, rep, &probe_seeds(common.seed.unwrap_or(0), count), &recipe)?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            write_tables(&mut run, &[result])?;
            run.finish()
        }
        Command::Sweep { common, task, t_grid } => {
            let grid = parse_t_grid(&t_grid).class(Class::Usage)?;
            let mut run = Run::new("sweep", &common);
            let (recipe, count) = probe_settings(&mut run, &common)?;
            let (backbone, dataset, name) = task_inputs(&mut run, &task)?;
            run.setting("t_grid", &t_grid);
            let seeds = probe_seeds(common.seed.unwrap_or(0), count);
            let results = evaluate_sweep(&name, &backbone, &dataset, &grid, &seeds, &recipe)?;
            write_tables(&mut run, &results)?;
            run.finish()
        }
        Command::AnalyzeAttention {
            common,
            checkpoint,
            data,
            representation: rep,
        } => {
            let rep = representation(&rep)?;
            let mut run = Run::new("analyze-attention", &common);
            let (backbone, seqs) = backbone_and_sequences(&mut run, &common, &checkpoint, &data)?;
            run.setting("representation", rep.tag());
            let fractions = attention_fractions(&backbone, &seqs, rep)?;
            run.setting("context_peaks_in_first_layer", context_peaks_early(&fractions));
            let mut out = Vec::new();
            write_fractions(&mut out, &fractions)?;
            run.write("attention.tsv", &out)?;
            run.finish()
        }
        Command::ExportEmbeddings {
            common,
            checkpoint,
            data,
            representation: rep,
        } => {
            let rep = representation(&rep)?;
            let mut run = Run::new("export-embeddings", &common);
            let (backbone, seqs) = backbone_and_sequences(&mut run, &common, &checkpoint, &data)?;
            run.setting("representation", rep.tag());
            let mut out = Vec::new();
            let rows = export_embeddings(&mut out, &backbone, &seqs, rep)?;
            run.setting("rows", rows);
            run.write("embeddings.tsv", &out)?;
            run.finish()
        }
    }
}

/// Checkpoint config with `--set` overrides; only `train.steps` may change.
fn extend(run: &mut Run, common: &Common, mut ckpt: Checkpoint) -> CliResult<(TrainConfig, Checkpoint)> {
    if common.config.is_some() {
        return Err(fail(Class::Usage, "--config cannot be combined with --resume"));
    }
    let stored = TrainConfig::parse(&ckpt.config_text).class(Class::Checkpoint)?;
    let config = train_config(run, common, Some(stored.clone()))?;
    let mut comparable = config.clone();
    comparable.steps = stored.steps;
    if comparable != stored {
        return Err(fail(Class::Config, "only train.steps may change when resuming"));
    }
    if config.steps < ckpt.step {
        return Err(fail(Class::Config, format!("train.steps {} is before checkpoint step {}", config.steps, ckpt.step)));
    }
    ckpt.config_text = config.to_text();
    Ok((config, ckpt))
}

fn backbone_and_sequences(
    run: &mut Run,
    common: &Common,
    checkpoint: &Path,
    data: &Path,
) -> CliResult<(Backbone, Vec<TokenSequence>)> {
    if common.config.is_some() || !common.set.is_empty() {
        return Err(fail(Class::Usage, "this command takes no configuration keys"));
    }
    let ckpt = load_checkpoint(run, "checkpoint", checkpoint)?;
    let backbone = Backbone::from_checkpoint(&ckpt)?;
    let seqs = load_sequences(run, data, lsd_core::seqdata::MAX_RESIDUES)?;
    Ok((backbone, seqs))
}

fn write_tables(run: &mut Run, results: &[lsd_core::probe::ProbeResult]) -> CliResult<()> {
    let mut rows = Vec::new();
    write_results(&mut rows, results)?;
    run.write("results.tsv", &rows)?;
    let mut agg = Vec::new();
    write_aggregate(&mut agg, results)?;
    run.write("aggregate.tsv", &agg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            report(&fail(Class::Usage, first.trim_start_matches("error: ")));
            return ExitCode::from(Class::Usage as u8);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(&f);
            ExitCode::from(f.class as u8)
        }
    }
}

fn report(f: &Failure) {
    let msg = f.msg.replace('\n', " ");
    let _ = writeln!(std::io::stderr(), "error[{}]: {msg}", f.class.name());
}

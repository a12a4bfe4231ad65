//! Command-line front end.
//!
//! ```text
//! ssml gen    -o corpus                         # corpus.features, corpus.labels
//! ssml train  --features corpus.features --labels corpus.labels -o model.ckpt
//! ssml mine   --checkpoint model.ckpt --features corpus.features
//! ssml eval   --checkpoint model.ckpt --features corpus.features --labels corpus.labels
//! ssml ablate --features corpus.features --labels corpus.labels
//! ```
//!
//! Settings resolve as flag, then `--config` file (`key=value` lines keyed by
//! long flag name), then built-in default. Exit status is 0 on success, 1 when
//! a flag or config value is rejected, 2 when the run itself fails.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::dplm::{format_line, mine_all, MiningKind};
use crate::embedding::{EmbeddingModel, LrSchedule};
use crate::error::{Error, Result};
use crate::eval::{cmc_map, mining_quality_of, report_csv_row, write_report_csv, EpochReport, REPORT_HEADER};
use crate::featurestore::{Dictionary, FeatureMatrix};
use crate::loss::Reduction;
use crate::io::{read_features, read_labels, write_features, write_labels, write_matrix};
use crate::par;
use crate::similarity::similarity_matrix;
use crate::synthdata::{generate, Split, SynthSpec};
use crate::trainer::{
    ablation_run, embed_all, full_grid, train, write_ablation_csv, BatchStats, EpochState, EvalSet,
    LossKind, TrainConfig, TrainObserver,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ssml", version, about = "Self-supervised metric learning on feature vectors")]
struct Cli {
    /// Worker threads [default: all cores]
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// key=value settings file; flags take precedence over it
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic identity-clustered corpus
    Gen(GenArgs),
    /// Train an embedding head without labels
    Train(TrainArgs),
    /// Dump mined positives and hard negatives for every sample
    Mine(MineArgs),
    /// CMC and mAP of a checkpoint on a labelled corpus
    Eval(EvalArgs),
    /// One training run per (loss, positives) cell
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Number of identities [default: 50]
    #[arg(long)]
    identities: Option<usize>,
    /// Samples per identity [default: 20]
    #[arg(long = "per-id")]
    per_id: Option<usize>,
    /// Feature dimension [default: 32]
    #[arg(long)]
    din: Option<usize>,
    /// Per-coordinate jitter std [default: 0.05]
    #[arg(long)]
    noise: Option<f64>,
    /// RNG seed [default: 7]
    #[arg(long)]
    seed: Option<u64>,
    /// Output prefix; writes <PREFIX>.features and <PREFIX>.labels
    #[arg(short, long, value_name = "PREFIX")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Share of each identity held out as queries [default: 0.2]
    #[arg(long = "query-fraction")]
    query_fraction: Option<f64>,
    /// Seed of the query/gallery split; match the gen seed [default: 7]
    #[arg(long = "split-seed")]
    split_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct HyperArgs {
    /// Training epochs [default: 60]
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size [default: 256]
    #[arg(long)]
    batch: Option<usize>,
    /// Similarity threshold tau [default: 0.6]
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// Hard-negative fraction gamma [default: 0.01]
    #[arg(long)]
    gamma: Option<f64>,
    /// Negative-term weight sigma [default: 0.2]
    #[arg(long)]
    sigma: Option<f64>,
    /// Triplet margin [default: 0.3]
    #[arg(long)]
    margin: Option<f64>,
    /// Self-positive warm-up epochs [default: 5]
    #[arg(long)]
    warmup: Option<usize>,
    /// Epochs between dictionary re-initialisations [default: 5]
    #[arg(long)]
    reinit: Option<usize>,
    /// RNG seed for weights and shuffling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// dtl or triplet [default: dtl]
    #[arg(long)]
    loss: Option<LossKind>,
    /// Per-probe term reduction, sum or mean [default: sum]
    #[arg(long)]
    reduction: Option<Reduction>,
    /// ps, rank, adj or intersection [default: intersection]
    #[arg(long)]
    positives: Option<MiningKind>,
    /// Initial learning rate [default: 0.01]
    #[arg(long)]
    lr: Option<f64>,
    /// Epochs between learning-rate decays [default: 10]
    #[arg(long = "lr-step")]
    lr_step: Option<usize>,
    /// Learning-rate decay factor [default: 0.1]
    #[arg(long = "lr-factor")]
    lr_factor: Option<f64>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    momentum: Option<f64>,
    /// Embedding dimension [default: 16]
    #[arg(long)]
    dim: Option<usize>,
    /// Width of an optional tanh hidden layer [default: none]
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Feature file
    #[arg(long)]
    features: PathBuf,
    /// Identity labels; used only for the per-epoch report
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Checkpoint path; snapshots go to <PATH>.epochNNN
    #[arg(short, long, value_name = "PATH")]
    out: PathBuf,
    /// Report CSV path [default: stdout]
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Debug, Args)]
struct MineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Similarity threshold tau [default: 0.6]
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// Hard-negative fraction gamma [default: 0.01]
    #[arg(long)]
    gamma: Option<f64>,
    /// Also write the thresholded similarity matrix here
    #[arg(long = "similarity-out")]
    similarity_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Similarity threshold tau for the mining columns [default: 0.6]
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// Hard-negative fraction gamma [default: 0.01]
    #[arg(long)]
    gamma: Option<f64>,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Comma-separated loss:positives cells, e.g. dtl:intersection,triplet:ps [default: all eight]
    #[arg(long)]
    cells: Option<String>,
    /// CSV path [default: stdout]
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    split: SplitArgs,
}

const CONFIG_KEYS: &[&str] = &[
    "identities", "per-id", "din", "noise", "seed", "query-fraction", "split-seed", "epochs",
    "batch", "tau", "gamma", "sigma", "margin", "warmup", "reinit", "loss", "positives", "lr",
    "lr-step", "lr-factor", "reduction", "momentum", "dim", "hidden", "cells",
];

/// Values from a `--config` file.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config("config", format!("line {}: expected key=value", no + 1)));
            };
            let k = k.trim();
            if !CONFIG_KEYS.contains(&k) {
                return Err(Error::config("config", format!("line {}: unknown key `{k}`", no + 1)));
            }
            values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn pick<T: FromStr>(&self, flag: Option<T>, key: &'static str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{raw}` from config file"))),
            None => Ok(default),
        }
    }

    fn pick_opt<T: FromStr>(&self, flag: Option<T>, key: &'static str) -> Result<Option<T>> {
        match (flag, self.get(key)) {
            (Some(v), _) => Ok(Some(v)),
            (None, Some(raw)) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::config(key, format!("cannot parse `{raw}` from config file"))),
            (None, None) => Ok(None),
        }
    }
}

fn resolve_train(h: &HyperArgs, file: &ConfigFile) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let config = TrainConfig {
        epochs: file.pick(h.epochs, "epochs", d.epochs)?,
        batch_size: file.pick(h.batch, "batch", d.batch_size)?,
        tau: file.pick(h.tau, "tau", d.tau)?,
        gamma: file.pick(h.gamma, "gamma", d.gamma)?,
        sigma: file.pick(h.sigma, "sigma", d.sigma)?,
        margin: file.pick(h.margin, "margin", d.margin)?,
        warmup_epochs: file.pick(h.warmup, "warmup", d.warmup_epochs)?,
        reinit_interval: file.pick(h.reinit, "reinit", d.reinit_interval)?,
        seed: file.pick(h.seed, "seed", d.seed)?,
        loss_kind: file.pick(h.loss, "loss", d.loss_kind)?,
        reduction: file.pick(h.reduction, "reduction", d.reduction)?,
        mining_kind: file.pick(h.positives, "positives", d.mining_kind)?,
        lr: LrSchedule {
            base: file.pick(h.lr, "lr", d.lr.base)?,
            step_epochs: file.pick(h.lr_step, "lr-step", d.lr.step_epochs)?,
            factor: file.pick(h.lr_factor, "lr-factor", d.lr.factor)?,
        },
        momentum: file.pick(h.momentum, "momentum", d.momentum)?,
        embed_dim: file.pick(h.dim, "dim", d.embed_dim)?,
        hidden: file.pick_opt(h.hidden, "hidden")?,
    };
    if config.lr.step_epochs == 0 {
        return Err(Error::config("lr-step", "must be at least 1"));
    }
    if !(config.lr.factor > 0.0 && config.lr.factor <= 1.0) {
        return Err(Error::config("lr-factor", format!("must lie in (0, 1], got {}", config.lr.factor)));
    }
    config.validate()?;
    Ok(config)
}

fn resolve_split(s: &SplitArgs, file: &ConfigFile) -> Result<(f64, u64)> {
    let d = SynthSpec::default();
    let frac = file.pick(s.query_fraction, "query-fraction", d.query_fraction)?;
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::config("query-fraction", format!("must lie in (0, 1), got {frac}")));
    }
    Ok((frac, file.pick(s.split_seed, "split-seed", d.seed)?))
}

fn resolve_tau_gamma(tau: Option<f64>, gamma: Option<f64>, file: &ConfigFile) -> Result<(f64, f64)> {
    let d = TrainConfig::default();
    let tau = file.pick(tau, "tau", d.tau)?;
    let gamma = file.pick(gamma, "gamma", d.gamma)?;
    TrainConfig { tau, gamma, ..d }.validate()?;
    Ok((tau, gamma))
}

fn parse_cells(raw: &str) -> Result<Vec<(LossKind, MiningKind)>> {
    raw.split(',')
        .map(|cell| {
            let (l, m) = cell
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::config("cells", format!("`{cell}` is not loss:positives")))?;
            let loss = l.parse().map_err(|_| Error::config("cells", format!("unknown loss `{l}`")))?;
            let kind = m.parse().map_err(|_| Error::config("cells", format!("unknown positives `{m}`")))?;
            Ok((loss, kind))
        })
        .collect()
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_eval(features: &FeatureMatrix, labels: &Path, frac: f64, seed: u64) -> Result<EvalSet> {
    let identities = read_labels(labels)?;
    if identities.len() != features.n() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} feature rows",
            identities.len(),
            features.n()
        )));
    }
    let split = Split::stratified(&identities, frac, seed);
    Ok(EvalSet { identities, split })
}

fn load_model(path: &Path) -> Result<EmbeddingModel> {
    let d = TrainConfig::default();
    EmbeddingModel::load(path, d.lr.base, d.momentum)
}

fn embed_checked(model: &EmbeddingModel, features: &FeatureMatrix) -> Result<FeatureMatrix> {
    if model.d_in() != features.d() {
        return Err(Error::DimensionMismatch {
            expected: model.d_in(),
            found: features.d(),
        });
    }
    embed_all(model, features)
}

/// Logs batch lines and snapshots the model after each re-initialisation period.
struct Progress<'a> {
    checkpoint: &'a Path,
    reinit_interval: usize,
}

impl TrainObserver for Progress<'_> {
    fn on_batch(&mut self, stats: &BatchStats) {
        log::info!("{stats}");
    }

    fn on_epoch_end(&mut self, state: &EpochState<'_>) -> Result<()> {
        let done = state.epoch + 1;
        if done % self.reinit_interval == 0 {
            state
                .model
                .save(sibling(self.checkpoint, &format!(".epoch{done:03}")))?;
        }
        Ok(())
    }
}

fn cmd_gen(a: &GenArgs, file: &ConfigFile) -> Result<()> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        num_identities: file.pick(a.identities, "identities", d.num_identities)?,
        samples_per_identity: file.pick(a.per_id, "per-id", d.samples_per_identity)?,
        d_in: file.pick(a.din, "din", d.d_in)?,
        intra_noise: file.pick(a.noise, "noise", d.intra_noise)?,
        seed: file.pick(a.seed, "seed", d.seed)?,
        query_fraction: file.pick(None, "query-fraction", d.query_fraction)?,
    };
    spec.validate()?;
    let corpus = generate(&spec)?;
    write_features(sibling(&a.out, ".features"), &corpus.features)?;
    write_labels(sibling(&a.out, ".labels"), &corpus.identities)?;
    log::info!(
        "wrote {} samples of {} identities to {}.{{features,labels}}",
        corpus.features.n(),
        spec.num_identities,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs, file: &ConfigFile) -> Result<()> {
    let config = resolve_train(&a.hyper, file)?;
    let (frac, split_seed) = resolve_split(&a.split, file)?;
    let features = read_features(&a.features)?;
    let eval = match &a.labels {
        Some(p) => Some(load_eval(&features, p, frac, split_seed)?),
        None => None,
    };
    let mut observer = Progress {
        checkpoint: &a.out,
        reinit_interval: config.reinit_interval,
    };
    let outcome = train(&config, &features, eval.as_ref(), &mut observer)?;
    outcome.model.save(&a.out)?;
    let mut w = output(a.report.as_deref())?;
    write_report_csv(&mut w, &outcome.reports)?;
    w.flush()?;
    Ok(())
}

fn cmd_mine(a: &MineArgs, file: &ConfigFile) -> Result<()> {
    let (tau, gamma) = resolve_tau_gamma(a.tau, a.gamma, file)?;
    let model = load_model(&a.checkpoint)?;
    let features = read_features(&a.features)?;
    let dict = Dictionary::new(embed_checked(&model, &features)?, 0)?;
    let sim = similarity_matrix(&dict, tau);
    let results = mine_all(&dict, &sim, tau, gamma)?;
    let mut w = output(None)?;
    for r in &results {
        writeln!(w, "{}", format_line(r.probe, &r.p_pos, &r.n_hard))?;
    }
    w.flush()?;
    if let Some(p) = &a.similarity_out {
        let mut f = BufWriter::new(File::create(p)?);
        write_matrix(&mut f, &sim.thresholded_values(), sim.n(), sim.n())?;
        f.flush()?;
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs, file: &ConfigFile) -> Result<()> {
    let (tau, gamma) = resolve_tau_gamma(a.tau, a.gamma, file)?;
    let (frac, split_seed) = resolve_split(&a.split, file)?;
    let model = load_model(&a.checkpoint)?;
    let features = read_features(&a.features)?;
    let eval = load_eval(&features, &a.labels, frac, split_seed)?;
    let emb = embed_checked(&model, &features)?;
    let ids = |idx: &[usize]| -> Vec<u32> { idx.iter().map(|&i| eval.identities[i]).collect() };
    let retrieval = cmc_map(
        &emb.select_rows(&eval.split.query)?,
        &ids(&eval.split.query),
        &emb.select_rows(&eval.split.gallery)?,
        &ids(&eval.split.gallery),
    )?;
    let dict = Dictionary::new(emb, 0)?;
    let sim = similarity_matrix(&dict, tau);
    let results = mine_all(&dict, &sim, tau, gamma)?;
    let quality = mining_quality_of(&results, MiningKind::Intersection, &eval.identities);
    let report = EpochReport {
        epoch: 0,
        retrieval: Some(retrieval),
        mining: Some(quality),
        mining_by_kind: Vec::new(),
        loss: f64::NAN,
    };
    let mut w = output(None)?;
    writeln!(w, "{REPORT_HEADER}")?;
    writeln!(w, "{}", report_csv_row(&report))?;
    w.flush()?;
    Ok(())
}

fn cmd_ablate(a: &AblateArgs, file: &ConfigFile) -> Result<()> {
    let config = resolve_train(&a.hyper, file)?;
    let (frac, split_seed) = resolve_split(&a.split, file)?;
    let grid = match file.pick_opt(a.cells.clone(), "cells")? {
        Some(raw) => parse_cells(&raw)?,
        None => full_grid(),
    };
    let features = read_features(&a.features)?;
    let eval = load_eval(&features, &a.labels, frac, split_seed)?;
    let rows = ablation_run(&grid, &config, &features, &eval)?;
    let mut w = output(a.out.as_deref())?;
    write_ablation_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p).map_err(|e| match e {
            Error::Io(io) => Error::config("config", format!("{}: {io}", p.display())),
            other => other,
        })?,
        None => ConfigFile::default(),
    };
    if cli.threads == Some(0) {
        return Err(Error::config("threads", "must be at least 1"));
    }
    par::with_threads(cli.threads, || match &cli.command {
        Command::Gen(a) => cmd_gen(a, &file),
        Command::Train(a) => cmd_train(a, &file),
        Command::Mine(a) => cmd_mine(a, &file),
        Command::Eval(a) => cmd_eval(a, &file),
        Command::Ablate(a) => cmd_ablate(a, &file),
    })
}

/// Exit status for `err`.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig { .. } | Error::InvalidGamma(_) => EXIT_INVALID,
        _ => EXIT_RUNTIME,
    }
}

fn describe(err: &Error) -> String {
    match err {
        Error::InvalidConfig { field, reason } => format!("invalid --{field}: {reason}"),
        Error::InvalidGamma(g) => format!("invalid --gamma: must lie in (0, 1], got {g}"),
        other => other.to_string(),
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            exit_code(&e)
        }
    }
}

//! The `vegcast` command line: generate, train, evaluate, report.

mod config;
mod dataset;
mod report;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use config::RunConfig;
pub use dataset::{cap_counts, dataset_hash, read_dataset, write_dataset, DatasetManifest, DATASET_FORMAT};
pub use report::{horizon_svg, landcover_svg, score_grid_svg};

use crate::baselines::Baseline;
use crate::binio::{create_dir, write_json};
use crate::error::Error;
use crate::evaluation::{evaluate_forecasts, outperformance, predict_cubes, wilcoxon_signed_rank, ScoreTable, Wilcoxon};
use crate::minicube::{Dataset, Minicube, Split};
use crate::models::{load_checkpoint, save_checkpoint, Family, Forecast, Model, WeatherStats};
use crate::training::{train_with, TrainState, TrainStatus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Contract(_) => EXIT_USAGE,
            Error::Divergence { .. } => EXIT_DIVERGED,
            Error::Format { .. } | Error::NoValidPixels | Error::Io { .. } | Error::Json { .. } => EXIT_DATA,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "vegcast", version, about = "Weather-conditioned NDVI forecasting on synthetic minicubes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum BaselineArg {
    Persistence,
    Prevyear,
    Climatology,
}

impl From<BaselineArg> for Baseline {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::Persistence => Baseline::Persistence,
            BaselineArg::Prevyear => Baseline::PreviousYear,
            BaselineArg::Climatology => Baseline::Climatology,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic minicube dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Total number of cubes, spread over the splits.
        #[arg(long)]
        cubes: Option<usize>,
    },
    /// Train a model; writes `checkpoint/`, `last/` and `train_log.jsonl`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        family: Option<String>,
        #[arg(long, value_enum)]
        meteo: Option<Switch>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train on spatially shuffled batches.
        #[arg(long)]
        shuffle: bool,
        /// Continue from `<out>/last`.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint or a baseline and compare it with every baseline.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        #[arg(long)]
        split: Option<String>,
        /// Forecast from spatially shuffled inputs.
        #[arg(long)]
        shuffle: bool,
    },
    /// Render figures from score tables.
    Report {
        /// Directories written by `evaluate`.
        #[arg(required = true)]
        tables: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Accept tables scored on different datasets or splits.
        #[arg(long)]
        allow_mixed: bool,
    },
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Generate { common, cubes } => {
            let mut cfg = base_config(&common, "generate")?;
            cfg.cubes = cubes.or(cfg.cubes);
            cmd_generate(&cfg, common.force).map(|_| ())
        }
        Command::Train { common, dataset, family, meteo, epochs, shuffle, resume } => {
            let mut cfg = base_config(&common, "train")?;
            cfg.dataset = dataset.or(cfg.dataset);
            if let Some(f) = family {
                cfg.family = Some(f.parse::<Family>()?);
            }
            if let Some(m) = meteo {
                cfg.meteo = Some(m == Switch::On);
            }
            if shuffle {
                cfg.shuffle = Some(true);
            }
            if let Some(e) = epochs {
                let mut t = cfg.train_config();
                t.epochs = e;
                cfg.train = Some(t);
            }
            cmd_train(&cfg, common.force, resume).map(|_| ())
        }
        Command::Evaluate { common, dataset, checkpoint, baseline, split, shuffle } => {
            let mut cfg = base_config(&common, "evaluate")?;
            cfg.dataset = dataset.or(cfg.dataset);
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.baseline = baseline.map(Baseline::from).or(cfg.baseline);
            if let Some(s) = split {
                cfg.split = Some(s.parse::<Split>()?);
            }
            if shuffle {
                cfg.shuffle = Some(true);
            }
            cmd_evaluate(&cfg, common.force).map(|_| ())
        }
        Command::Report { tables, out, force, allow_mixed } => {
            let out = out.ok_or_else(|| CliError::usage("--out is required"))?;
            cmd_report(&tables, &out, force, allow_mixed).map(|_| ())
        }
    }
}

fn base_config(common: &Common, command: &str) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::usage(format!("cannot read config: {e}")))?,
        None => RunConfig::default(),
    };
    cfg.command = Some(command.to_string());
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.out.is_some() {
        cfg.out = common.out.clone();
    }
    Ok(cfg)
}

/// Ensures `dir` is absent or empty; with `force` an existing directory is removed.
fn prepare_out(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(CliError::usage(format!("{} exists and is not empty; pass --force to replace it", dir.display())));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(create_dir(dir)?)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::usage(format!("--{flag} is required")))
}

pub fn cmd_generate(cfg: &RunConfig, force: bool) -> CliResult<DatasetManifest> {
    let out = required(&cfg.out, "out")?;
    let world = cfg.world();
    let mut splits = cfg.split_spec();
    splits.validate()?;
    if let Some(n) = cfg.cubes {
        splits = cap_counts(&splits, n);
    }
    prepare_out(out, force)?;
    let (manifest, _) = write_dataset(out, &world, &splits)?;
    eprintln!("wrote {} cubes to {} (dataset {})", manifest.counts.values().sum::<usize>(), out.display(), manifest.hash);
    Ok(manifest)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    config_hash: String,
    dataset_hash: &'a str,
    model_config_hash: &'a str,
    config: &'a RunConfig,
}

/// Training outcome as recorded next to the best checkpoint.
#[derive(Serialize)]
struct TrainSummary {
    status: TrainStatus,
    best_val_rmse: Option<f64>,
    best_epoch: Option<usize>,
    epochs_done: usize,
    steps: u64,
    dataset_hash: String,
}

pub fn cmd_train(cfg: &RunConfig, force: bool, resume: bool) -> CliResult<TrainStatus> {
    let out = required(&cfg.out, "out")?.to_path_buf();
    let (manifest, ds) = read_dataset(required(&cfg.dataset, "dataset")?)?;
    let train = ds.split(Split::Train);
    let val = ds.split(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(CliError { code: EXIT_DATA, message: "dataset needs non-empty train and val splits".into() });
    }
    let tcfg = cfg.train_config();
    let last = out.join("last");
    let (model, state) = if resume {
        let ck = load_checkpoint(&last).map_err(|e| CliError { code: EXIT_DATA, message: format!("cannot resume: {e}") })?;
        let state = TrainState::from_checkpoint(&ck)?;
        (ck.model, Some(state))
    } else {
        prepare_out(&out, force)?;
        let model = Model::new(cfg.model_config(), WeatherStats::fit(&train)?)?;
        (model, None)
    };
    let record = RunRecord {
        config_hash: cfg.hash(),
        dataset_hash: &manifest.hash,
        model_config_hash: model.config_hash(),
        config: cfg,
    };
    write_json(&out.join("run.json"), &record)?;
    let outcome = train_with(model, &train, &val, &tcfg, state, |m, s| {
        let (tensors, meta) = s.to_checkpoint_parts(m);
        save_checkpoint(&last, m, &tensors, meta)?;
        s.log.write_jsonl(&out.join("train_log.jsonl"))
    })?;
    let state = &outcome.state;
    state.log.write_jsonl(&out.join("train_log.jsonl"))?;
    if !last.exists() {
        let (tensors, meta) = state.to_checkpoint_parts(&outcome.model);
        save_checkpoint(&last, &outcome.model, &tensors, meta)?;
    }
    let summary = TrainSummary {
        status: outcome.status,
        best_val_rmse: state.best_val,
        best_epoch: state.best_epoch,
        epochs_done: state.epochs_done,
        steps: state.step,
        dataset_hash: manifest.hash.clone(),
    };
    let metrics = serde_json::to_value(&summary).expect("serializable");
    save_checkpoint(&out.join("checkpoint"), &outcome.model, &[], metrics)?;
    match outcome.status {
        TrainStatus::Diverged { epoch } => Err(Error::Divergence { epoch }.into()),
        s => {
            eprintln!("training {:?} after {} epochs; best val RMSE {:?}", s, state.epochs_done, state.best_val);
            Ok(s)
        }
    }
}

/// One reference comparison written to `comparison.json`.
#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub reference: String,
    pub reference_rmse: Option<f64>,
    pub outperformance: Option<f64>,
    /// Signed-rank test on per-cube RMSE differences (reference − model).
    pub wilcoxon_rmse: Option<Wilcoxon>,
}

fn baseline_forecasts(b: Baseline, cubes: &[&Minicube], ds: &Dataset) -> CliResult<Vec<Forecast>> {
    cubes.iter().map(|c| b.forecast(c, ds.history(c)).map_err(CliError::from)).collect()
}

fn compare(model: &ScoreTable, reference: &ScoreTable) -> Comparison {
    let a = model.per_cube();
    let b = reference.per_cube();
    let diffs: Vec<f64> = a.iter().filter_map(|(c, m)| b.get(c).map(|r| r.rmse - m.rmse)).collect();
    Comparison {
        reference: reference.model_id.clone(),
        reference_rmse: reference.macro_avg.map(|m| m.rmse),
        outperformance: outperformance(model, reference).ok(),
        wilcoxon_rmse: wilcoxon_signed_rank(&diffs).ok(),
    }
}

pub fn cmd_evaluate(cfg: &RunConfig, force: bool) -> CliResult<ScoreTable> {
    let out = required(&cfg.out, "out")?;
    let (manifest, ds) = read_dataset(required(&cfg.dataset, "dataset")?)?;
    let split = cfg.split();
    let cubes = ds.split(split);
    if cubes.is_empty() {
        return Err(CliError { code: EXIT_DATA, message: format!("dataset has no {split} cubes") });
    }
    let shuffle = cfg.shuffle.unwrap_or(false);
    let (forecasts, model_id, hash) = match (&cfg.checkpoint, cfg.baseline) {
        (Some(_), Some(_)) => return Err(CliError::usage("give either --checkpoint or --baseline, not both")),
        (None, None) => return Err(CliError::usage("one of --checkpoint or --baseline is required")),
        (Some(path), None) => {
            if !path.join("manifest.json").exists() {
                return Err(CliError { code: EXIT_DATA, message: format!("no checkpoint at {}", path.display()) });
            }
            let model = load_checkpoint(path)?.model;
            let bs = cfg.train_config().eval_batch_size;
            let seed = cfg.seed.unwrap_or(0);
            let fc = predict_cubes(&model, &cubes, bs, shuffle.then_some(seed))?;
            (fc, model.model_id(), model.config_hash().to_string())
        }
        (None, Some(b)) => {
            if shuffle {
                return Err(CliError::usage("--shuffle has no effect on pixelwise baselines"));
            }
            (baseline_forecasts(b, &cubes, &ds)?, b.id().to_string(), b.hash())
        }
    };
    let mut table = evaluate_forecasts(&model_id, &hash, &cubes, &forecasts)?;
    table.dataset_hash = Some(manifest.hash.clone());
    table.split = Some(split.to_string());
    table.shuffled = shuffle;
    if table.macro_avg.is_none() {
        eprintln!("warning: no pixel of the {split} split passed the filter");
    }
    let mut comparisons = Vec::new();
    for b in [Baseline::Persistence, Baseline::PreviousYear, Baseline::Climatology] {
        let reference = evaluate_forecasts(b.id(), &b.hash(), &cubes, &baseline_forecasts(b, &cubes, &ds)?)?;
        let c = compare(&table, &reference);
        if b == Baseline::Climatology {
            table.outperformance = c.outperformance;
        }
        comparisons.push(c);
    }
    prepare_out(out, force)?;
    table.write(out)?;
    write_json(&out.join("comparison.json"), &comparisons)?;
    if let Some(m) = table.macro_avg {
        eprintln!(
            "{model_id} on {split}: RMSE {:.4}, R² {:.3}, outperformance vs climatology {:?}",
            m.rmse, m.r2, table.outperformance
        );
    }
    Ok(table)
}

#[derive(Serialize)]
struct ReportEntry<'a> {
    model_id: &'a str,
    config_hash: &'a str,
    dataset_hash: Option<&'a str>,
    split: Option<&'a str>,
    shuffled: bool,
    n_pixels: usize,
    rmse: Option<f64>,
    r2: Option<f64>,
    rmse_short: Option<f64>,
    outperformance: Option<f64>,
}

#[derive(Serialize)]
struct Report<'a> {
    tables: Vec<ReportEntry<'a>>,
    warnings: Vec<String>,
}

/// Writes `horizon_rmse.svg`, `landcover_rmse.svg`, one `grid_<n>.svg` per table and
/// `report.json`; returns the warnings issued.
pub fn cmd_report(inputs: &[PathBuf], out: &Path, force: bool, allow_mixed: bool) -> CliResult<Vec<String>> {
    let tables: Vec<ScoreTable> = inputs.iter().map(|p| ScoreTable::load(p)).collect::<Result<_, _>>()?;
    let mut contexts: Vec<(Option<&str>, Option<&str>)> =
        tables.iter().map(|t| (t.dataset_hash.as_deref(), t.split.as_deref())).collect();
    contexts.sort();
    contexts.dedup();
    if contexts.len() > 1 && !allow_mixed {
        return Err(CliError::usage(format!(
            "score tables come from {} different dataset/split combinations; pass --allow-mixed to plot them together",
            contexts.len()
        )));
    }
    let mut warnings = Vec::new();
    for (t, p) in tables.iter().zip(inputs) {
        if t.n_pixels == 0 {
            warnings.push(format!("{} ({}) has no scored pixels; its plots are empty", t.model_id, p.display()));
        }
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    prepare_out(out, force)?;
    let write = |name: &str, text: String| -> CliResult<()> {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| CliError::from(Error::io(&p, e)))
    };
    write("horizon_rmse.svg", horizon_svg(&tables))?;
    write("landcover_rmse.svg", landcover_svg(&tables))?;
    for (i, t) in tables.iter().enumerate() {
        write(&format!("grid_{i}.svg"), score_grid_svg(t))?;
    }
    let report = Report {
        tables: tables
            .iter()
            .map(|t| ReportEntry {
                model_id: &t.model_id,
                config_hash: &t.config_hash,
                dataset_hash: t.dataset_hash.as_deref(),
                split: t.split.as_deref(),
                shuffled: t.shuffled,
                n_pixels: t.n_pixels,
                rmse: t.macro_avg.map(|m| m.rmse),
                r2: t.macro_avg.map(|m| m.r2),
                rmse_short: t.rmse_short,
                outperformance: t.outperformance,
            })
            .collect(),
        warnings: warnings.clone(),
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(warnings)
}

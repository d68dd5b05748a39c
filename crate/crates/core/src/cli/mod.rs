//! The `mlde` command line.

mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::dataset::{load_manifest, DatasetManifest, DiagnosisClass, Split};
use crate::evaluation::{
    compare_report, evaluate_predictions, predict_dataset_with, roc_curve, roc_svg, write_predictions_csv, EvalError,
    EvaluationReport, PredictionTable, ScoredSet,
};
use crate::synth::{write_dataset, SynthSpec};
use crate::training::{
    checkpoint_path, load_checkpoint_expecting, run_task_bank, CheckpointError, FileSource, TaskStatus, TrainConfig,
    TrainOptions, CHECKPOINT_VERSION,
};

pub use config::{render_schema, RunConfig, SchemaEntry, SCHEMA};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_TRAINING: i32 = 4;
pub const EXIT_EVALUATION: i32 = 5;

#[derive(Parser, Debug)]
#[command(
    name = "mlde",
    version,
    about = "Multi-level deep ensembles for lesion classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic multiscale dataset
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 350)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the seven one-vs-rest ensembles
    Train(Common),
    /// Write the prediction file for eval_manifest
    Predict(Common),
    /// Score eval_manifest against its labels
    Evaluate(Common),
    /// Render the branch-vs-ensemble comparison table
    Report(Common),
    /// Print every configuration key
    ConfigSchema,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML file of flat key = value pairs
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a key, e.g. --set seed=3 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub deterministic: bool,
}

/// A failed command: exit code plus a message and details.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub kind: &'static str,
    pub exit_code: i32,
    pub message: String,
    pub details: Vec<String>,
}

impl CliError {
    fn new(kind: &'static str, exit_code: i32, message: impl Into<String>) -> Self {
        Self {
            kind,
            exit_code,
            message: message.into(),
            details: Vec::new(),
        }
    }

    fn config(details: Vec<String>) -> Self {
        Self {
            details,
            ..Self::new("config", EXIT_CONFIG, "invalid configuration")
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self::new("data", EXIT_DATA, message)
    }

    fn training(message: impl Into<String>) -> Self {
        Self::new("training", EXIT_TRAINING, message)
    }

    fn evaluation(message: impl Into<String>) -> Self {
        Self::new("evaluation", EXIT_EVALUATION, message)
    }

    /// Single-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Predict(_) | EvalError::Io { .. } => CliError::data(e.to_string()),
            _ => CliError::evaluation(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;
type TaskScores<T> = BTreeMap<DiagnosisClass, T>;

/// Run metadata written next to every command's outputs.
#[derive(Debug, Serialize)]
struct RunMetadata<'a> {
    command: &'a str,
    config_hash: String,
    train_config_hash: String,
    seed: u64,
    workers: usize,
    deterministic: bool,
    versions: BTreeMap<&'static str, String>,
    config: &'a RunConfig,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            e.exit_code
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Synth { out_dir, n, seed } => cmd_synth(&out_dir, n, seed),
        Command::ConfigSchema => {
            print!("{}", render_schema());
            Ok(())
        }
        Command::Train(c) => cmd_train(&resolve(&c)?),
        Command::Predict(c) => cmd_predict(&resolve(&c)?).map(|_| ()),
        Command::Evaluate(c) => cmd_evaluate(&resolve(&c)?).map(|_| ()),
        Command::Report(c) => cmd_report(&resolve(&c)?),
    }
}

/// Config file plus overrides plus flags, in increasing precedence.
pub fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut config = RunConfig::load(common.config.as_deref(), &common.set).map_err(CliError::config)?;
    if common.out_dir.is_some() {
        config.out_dir = common.out_dir.clone();
    }
    if common.seed.is_some() {
        config.seed = common.seed;
    }
    if common.workers.is_some() {
        config.workers = common.workers;
    }
    if common.deterministic {
        config.deterministic = Some(true);
    }
    Ok(config)
}

pub fn cmd_synth(out_dir: &Path, n: usize, seed: u64) -> CliResult<()> {
    let out = write_dataset(out_dir, &SynthSpec::new(n, seed)).map_err(|e| CliError::data(e.to_string()))?;
    println!(
        "wrote {} training and {} test images to {}",
        out.meta.train_images,
        out.meta.test_images,
        out_dir.display()
    );
    Ok(())
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write_metadata(command: &str, config: &RunConfig, train: &TrainConfig) -> CliResult<()> {
    let out = config.out_dir();
    create_dir(&out)?;
    let versions = BTreeMap::from([
        ("mlde", env!("CARGO_PKG_VERSION").to_string()),
        ("checkpoint_format", CHECKPOINT_VERSION.to_string()),
    ]);
    let meta = RunMetadata {
        command,
        config_hash: config.hash(),
        train_config_hash: train.hash(),
        seed: train.seed,
        workers: config.workers(),
        deterministic: config.deterministic(),
        versions,
        config,
    };
    // one entry per command, so evaluating does not erase the training record
    let path = out.join("run_metadata.json");
    let mut all: serde_json::Map<String, serde_json::Value> = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    all.insert(
        command.to_string(),
        serde_json::to_value(&meta).expect("metadata serializes"),
    );
    let json = serde_json::to_string_pretty(&all).expect("metadata serializes");
    write_file(&path, json + "\n")
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::config(vec![format!("{key} is required for this command")]))
}

fn manifest(path: &Path, split: Split) -> CliResult<DatasetManifest> {
    load_manifest(path, split).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Validates the config and sizes the worker pool.
fn prepare(config: &RunConfig) -> CliResult<TrainConfig> {
    let train = config.train_config().map_err(CliError::config)?;
    // fails harmlessly if a pool already exists in this process
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers())
        .build_global();
    Ok(train)
}

pub fn cmd_train(config: &RunConfig) -> CliResult<()> {
    let mut missing = Vec::new();
    if config.train_manifest.is_none() {
        missing.push("train_manifest is required for train".to_string());
    }
    let train_config = match (prepare(config), missing.is_empty()) {
        (Ok(t), true) => t,
        (Ok(_), false) => return Err(CliError::config(missing)),
        (Err(mut e), _) => {
            missing.append(&mut e.details);
            return Err(CliError::config(missing));
        }
    };
    let train = manifest(required(&config.train_manifest, "train_manifest")?, Split::Train)?;
    let validation = config
        .validation_manifest
        .as_deref()
        .map(|p| manifest(p, Split::Validation))
        .transpose()?;
    write_metadata("train", config, &train_config)?;
    let dir = config.checkpoint_dir();
    create_dir(&dir)?;
    let options = TrainOptions {
        workers: config.workers(),
        ..TrainOptions::new(&FileSource)
    };
    let report = run_task_bank(&train, validation.as_ref(), &train_config, options, Some(&dir), false);
    let summary = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&config.out_dir().join("train_summary.json"), summary + "\n")?;
    for t in &report.tasks {
        let status = match &t.status {
            TaskStatus::Trained => "trained".to_string(),
            TaskStatus::Degenerate => "degenerate (no positives or negatives)".to_string(),
            TaskStatus::Failed(e) => format!("FAILED: {e}"),
        };
        println!("{:<6} {status}", t.target.code());
    }
    let failed: Vec<String> = report.failures().map(|t| t.target.code().to_string()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        let mut e = CliError::training(format!("{} of 7 tasks failed", failed.len()));
        e.details = report
            .failures()
            .map(|t| match &t.status {
                TaskStatus::Failed(m) => format!("{}: {m}", t.target.code()),
                _ => unreachable!(),
            })
            .collect();
        Err(e)
    }
}

/// Loads each class's checkpoint on demand and scores `eval_manifest`.
fn predict_table(config: &RunConfig, train_config: &TrainConfig) -> CliResult<(DatasetManifest, PredictionTable)> {
    let eval = manifest(required(&config.eval_manifest, "eval_manifest")?, Split::Test)?;
    let dir = config.checkpoint_dir();
    let missing: Vec<String> = DiagnosisClass::ALL
        .iter()
        .filter(|c| !checkpoint_path(&dir, **c).exists())
        .map(|c| {
            format!(
                "missing checkpoint for class {} ({})",
                c.code(),
                checkpoint_path(&dir, *c).display()
            )
        })
        .collect();
    if !missing.is_empty() {
        let mut e = CliError::data(missing[0].clone());
        e.details = missing;
        return Err(e);
    }
    let mut load_error: Option<CliError> = None;
    let table = predict_dataset_with(
        |class| {
            load_checkpoint_expecting(checkpoint_path(&dir, class), train_config).map_err(|e| {
                let err = match &e {
                    CheckpointError::ConfigMismatch { .. } => CliError::config(vec![format!("{}: {e}", class.code())]),
                    _ => CliError::data(format!("checkpoint for class {}: {e}", class.code())),
                };
                load_error = Some(err);
                EvalError::MissingModel(class)
            })
        },
        &eval,
        &FileSource,
    );
    match (table, load_error) {
        (_, Some(e)) => Err(e),
        (Ok(t), None) => Ok((eval, t)),
        (Err(e), None) => Err(e.into()),
    }
}

pub fn cmd_predict(config: &RunConfig) -> CliResult<PathBuf> {
    let train_config = prepare(config)?;
    write_metadata("predict", config, &train_config)?;
    let (_, table) = predict_table(config, &train_config)?;
    let path = config.predictions_path();
    write_predictions_csv(&table, &path)?;
    println!("wrote {} predictions to {}", table.len(), path.display());
    Ok(path)
}

pub fn cmd_evaluate(config: &RunConfig) -> CliResult<EvaluationReport> {
    let train_config = prepare(config)?;
    write_metadata("evaluate", config, &train_config)?;
    let (eval, table) = predict_table(config, &train_config)?;
    write_predictions_csv(&table, config.predictions_path())?;
    let report = evaluate_predictions(&table, &eval)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&config.out_dir().join("evaluation.json"), json + "\n")?;
    if let Some(svg_path) = &config.roc_svg {
        let labels: BTreeMap<&str, DiagnosisClass> = eval
            .entries()
            .iter()
            .filter_map(|e| e.label.map(|l| (e.image_id.as_str(), l)))
            .collect();
        let mut curves = Vec::new();
        for class in DiagnosisClass::ALL {
            let y: Vec<u8> = table
                .rows
                .iter()
                .map(|r| u8::from(labels[r.image_id.as_str()] == class))
                .collect();
            let set = ScoredSet::new(&table.class_scores(class), &y)
                .map_err(|e| CliError::evaluation(format!("{class}: {e}")))?;
            let roc = roc_curve(&set).map_err(|e| CliError::evaluation(format!("{class}: {e}")))?;
            let label = format!("{} ({:.3})", class.code(), report.per_task_auc[&class]);
            curves.push((label, roc));
        }
        write_file(svg_path, roc_svg(&curves, "ROC curves per one-vs-rest task"))?;
    }
    for (class, a) in &report.per_task_auc {
        println!("{:<6} {a:.4}", class.code());
    }
    println!("{:<6} {:.4}", "mean", report.mean_auc);
    Ok(report)
}

pub fn cmd_report(config: &RunConfig) -> CliResult<()> {
    let path = config.out_dir().join("evaluation.json");
    let report: serde_json::Value = match std::fs::read_to_string(&path) {
        Ok(text) => {
            serde_json::from_str(&text).map_err(|e| CliError::evaluation(format!("{}: {e}", path.display())))?
        }
        Err(_) => serde_json::to_value(cmd_evaluate(config)?).expect("report serializes"),
    };
    let parsed: Result<(TaskScores<f64>, TaskScores<[f64; 4]>), _> = serde_json::from_value(serde_json::json!([
        report["per_task_auc"],
        report["per_task_branch_auc"]
    ]));
    let (ensemble, branches) = parsed.map_err(|e| {
        CliError::evaluation(format!(
            "{} lacks per-task ensemble and branch AUCs: {e}",
            path.display()
        ))
    })?;
    let comparison = compare_report(&ensemble, &branches)?;
    let table = comparison.render_table();
    let out = config.out_dir();
    write_file(
        &out.join("report.json"),
        serde_json::to_string_pretty(&comparison).expect("report serializes") + "\n",
    )?;
    write_file(&out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

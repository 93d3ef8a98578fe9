//! The `halspan` command line: `run`, `score`, `validate` and `mockgen`.
//!
//! Exit codes: 0 on success, 1 on configuration or validation errors, 2 on
//! I/O errors. Problems with individual samples never abort a batch; they
//! are logged and summarized.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use thiserror::Error;

use crate::backends::{
    Backend, BackendConfig, BackendError, CachedBackend, DiskCache, HttpBackend, MockBackend,
    ModelId,
};
use crate::ensemble::{AbstentionPolicy, Ensemble, EnsembleError, PipelineConfig, SampleOutcome};
use crate::ingest::{
    generate_planted_corpus, read_dataset, read_predictions, write_dataset, write_predictions,
    IngestError, PlantedError, Prediction,
};
use crate::metrics::{score_dataset, MetricsError, ScoreReport};
use crate::prompting::{PromptError, PromptTemplate};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PlantedError> for CliError {
    fn from(e: PlantedError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Cache { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "halspan",
    version,
    about = "Hallucination span detection with an LLM ensemble"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label a dataset with the rotating ensemble.
    Run(RunArgs),
    /// Score prediction files against gold labels.
    Score(ScoreArgs),
    /// Check a dataset's records and report violations.
    Validate(ValidateArgs),
    /// Generate a planted corpus with known hallucinated spans.
    Mockgen(MockgenArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// One prediction file per extractor.
    PerRun,
    /// Per-extractor files plus a majority-vote merge.
    Consensus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Live,
    /// Deterministic planted-corpus oracle; `--seed` must match `mockgen`.
    Mock,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Input JSONL dataset.
    #[arg(short, long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(short, long)]
    pub output: PathBuf,
    /// TOML file with models, endpoints and thresholds.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub alignment_threshold: Option<f64>,
    #[arg(long, value_enum, default_value_t = Mode::PerRun)]
    pub mode: Mode,
    /// Only run the rotation where this model extracts (per-run mode).
    #[arg(long)]
    pub extractor: Option<String>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Samples processed in parallel.
    #[arg(long)]
    pub max_concurrency: Option<usize>,
    #[arg(long, value_enum, default_value_t = BackendKind::Live)]
    pub backend: BackendKind,
    #[arg(long)]
    pub extraction_template: Option<PathBuf>,
    #[arg(long)]
    pub adjudication_template: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Gold JSONL dataset.
    #[arg(short, long)]
    pub gold: PathBuf,
    /// Prediction files; each gets its own table.
    #[arg(required = true)]
    pub predictions: Vec<PathBuf>,
    /// Directory for `<prediction stem>.score.json` reports.
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
    /// Report one overall row instead of one row per language.
    #[arg(long)]
    pub no_lang_groups: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct MockgenArgs {
    /// Total samples, split evenly across languages.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, value_delimiter = ',', default_value = "en,ar,hi")]
    pub langs: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Share of samples without any planted span.
    #[arg(long, default_value_t = 0.2)]
    pub zero_fraction: f64,
    #[arg(short, long)]
    pub output: PathBuf,
}

/// Contents of the `--config` TOML file. Command-line flags take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub models: Option<Vec<ModelId>>,
    pub hard_threshold: Option<f64>,
    pub alignment_threshold: Option<f64>,
    pub abstention: Option<AbstentionPolicy>,
    pub parse_retries: Option<u32>,
    pub max_concurrency: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    #[serde(default, rename = "backend")]
    pub backends: Vec<BackendConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io(path))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

fn pipeline_config(args: &RunArgs, file: &FileConfig) -> Result<PipelineConfig, CliError> {
    let mut cfg = PipelineConfig::default();
    if let Some(m) = &file.models {
        cfg.models = m.clone();
    }
    cfg.hard_threshold = args
        .threshold
        .or(file.hard_threshold)
        .unwrap_or(cfg.hard_threshold);
    cfg.alignment_threshold = args
        .alignment_threshold
        .or(file.alignment_threshold)
        .unwrap_or(cfg.alignment_threshold);
    cfg.abstention = file.abstention.unwrap_or(cfg.abstention);
    cfg.parse_retries = file.parse_retries.unwrap_or(cfg.parse_retries);
    cfg.validate()?;
    Ok(cfg)
}

fn build_backends(
    args: &RunArgs,
    file: &FileConfig,
    models: &[ModelId],
) -> Result<Vec<Arc<dyn Backend>>, CliError> {
    let cache = match args.cache_dir.as_ref().or(file.cache_dir.as_ref()) {
        Some(dir) => Some(Arc::new(DiskCache::open(dir)?)),
        None => None,
    };
    let configured: HashMap<&ModelId, &BackendConfig> =
        file.backends.iter().map(|b| (&b.model, b)).collect();
    models
        .iter()
        .map(|model| {
            let backend: Arc<dyn Backend> = match args.backend {
                BackendKind::Mock => Arc::new(MockBackend::new(model.clone(), args.seed)),
                BackendKind::Live => {
                    let cfg = match configured.get(model) {
                        Some(c) => (*c).clone(),
                        None => BackendConfig::preset(model).ok_or_else(|| {
                            CliError::Config(format!("no endpoint configured for {model}"))
                        })?,
                    };
                    Arc::new(HttpBackend::new(cfg)?)
                }
            };
            Ok(match &cache {
                Some(c) => Arc::new(CachedBackend::new(backend, c.clone())) as Arc<dyn Backend>,
                None => backend,
            })
        })
        .collect()
}

/// What `run` did, for callers and the final summary line.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub samples: usize,
    pub runs: usize,
    pub failed_runs: usize,
    pub dropped_candidates: usize,
    pub files: Vec<PathBuf>,
}

fn predictions_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("predictions.{name}.jsonl"))
}

pub fn cmd_run(args: &RunArgs) -> Result<RunSummary, CliError> {
    let file = match &args.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let config = pipeline_config(args, &file)?;
    if args.extractor.is_some() && args.mode == Mode::Consensus {
        return Err(CliError::Config(
            "--extractor only applies to per-run mode".into(),
        ));
    }
    let max_concurrency = args.max_concurrency.or(file.max_concurrency).unwrap_or(4);
    if max_concurrency == 0 {
        return Err(CliError::Config(
            "--max-concurrency must be at least 1".into(),
        ));
    }

    let backends = build_backends(args, &file, &config.models)?;
    let mut ensemble = Ensemble::new(config, backends)?;
    if args.extraction_template.is_some() || args.adjudication_template.is_some() {
        let load = |p: &Option<PathBuf>, default: fn() -> PromptTemplate| match p {
            Some(p) => PromptTemplate::load(p),
            None => Ok(default()),
        };
        ensemble = ensemble.with_templates(
            load(
                &args.extraction_template,
                PromptTemplate::extraction_default,
            )?,
            load(
                &args.adjudication_template,
                PromptTemplate::adjudication_default,
            )?,
        );
    }
    let rotations = match &args.extractor {
        Some(name) => {
            let model = ModelId::new(name.as_str())?;
            vec![ensemble.rotation_for(&model)?]
        }
        None => ensemble.rotations(),
    };

    let dataset = read_dataset(&args.input)?;
    for issue in &dataset.issues {
        log::warn!(
            "{}: line {}: {}",
            args.input.display(),
            issue.line,
            issue.message
        );
    }
    // models never see gold labels
    let samples: Vec<_> = dataset.samples.iter().map(|s| s.without_gold()).collect();
    let consensus = args.mode == Mode::Consensus;
    let outcomes = ensemble.run_dataset(&samples, &rotations, consensus, max_concurrency)?;

    fs::create_dir_all(&args.output).map_err(io(&args.output))?;
    let mut files = Vec::new();
    for (k, rotation) in rotations.iter().enumerate() {
        let preds: Vec<Prediction> = samples
            .iter()
            .zip(&outcomes)
            .map(|(s, o)| Prediction::new(s, o.runs[k].soft.clone(), o.runs[k].hard.clone()))
            .collect();
        let path = predictions_path(&args.output, rotation.extractor.as_str());
        write_predictions(&path, samples.iter().zip(&preds))?;
        files.push(path);
    }
    if consensus {
        let preds: Vec<Prediction> = samples
            .iter()
            .zip(&outcomes)
            .map(|(s, o)| {
                let c = o.consensus.as_ref().expect("consensus requested");
                Prediction::new(s, c.merged_soft.clone(), c.merged_hard.clone())
            })
            .collect();
        let path = predictions_path(&args.output, "consensus");
        write_predictions(&path, samples.iter().zip(&preds))?;
        files.push(path);
    }
    let log_path = args.output.join("run_log.jsonl");
    write_run_log(&log_path, &outcomes)?;
    files.push(log_path);

    let summary = RunSummary {
        samples: samples.len(),
        runs: outcomes.iter().map(|o| o.runs.len()).sum(),
        failed_runs: outcomes
            .iter()
            .flat_map(|o| &o.runs)
            .filter(|r| r.failure.is_some())
            .count(),
        dropped_candidates: outcomes
            .iter()
            .flat_map(|o| &o.runs)
            .map(|r| r.dropped.len())
            .sum(),
        files,
    };
    for o in &outcomes {
        for r in o.runs.iter().filter(|r| r.failure.is_some()) {
            log::error!(
                "{}: run {} failed: {}",
                o.sample_id,
                r.extractor,
                r.failure.as_deref().unwrap_or("")
            );
        }
    }
    Ok(summary)
}

fn write_run_log(path: &Path, outcomes: &[SampleOutcome]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
    for call in outcomes.iter().flat_map(|o| &o.calls) {
        let line = serde_json::to_string(call).expect("call record serializes");
        writeln!(w, "{line}").map_err(io(path))?;
    }
    w.flush().map_err(io(path))
}

/// One report per prediction file, in argument order.
pub fn cmd_score(args: &ScoreArgs) -> Result<Vec<(PathBuf, ScoreReport)>, CliError> {
    let gold = read_dataset(&args.gold)?;
    for issue in &gold.issues {
        log::warn!(
            "{}: line {}: {}",
            args.gold.display(),
            issue.line,
            issue.message
        );
    }
    let mut reports = Vec::new();
    for path in &args.predictions {
        let preds = read_predictions(path)?;
        for issue in &preds.issues {
            log::warn!("{}: line {}: {}", path.display(), issue.line, issue.message);
        }
        let report = score_dataset(&preds.predictions, &gold.samples, !args.no_lang_groups)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if !report.missing.is_empty() {
            log::warn!(
                "{}: {} gold samples without prediction scored as empty",
                path.display(),
                report.missing.len()
            );
        }
        if let Some(dir) = &args.report_dir {
            fs::create_dir_all(dir).map_err(io(dir))?;
            let stem = path
                .file_stem()
                .map_or_else(|| "predictions".into(), |s| s.to_string_lossy());
            let out = dir.join(format!("{stem}.score.json"));
            let json = serde_json::to_string_pretty(&report.by_lang).expect("report serializes");
            fs::write(&out, json + "\n").map_err(io(&out))?;
        }
        reports.push((path.clone(), report));
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    /// `(line, message)` per rejected record.
    pub violations: Vec<(usize, String)>,
    /// Lines whose overlapping hard labels were merged.
    pub merged_lines: Vec<usize>,
    pub records: usize,
}

impl ValidationReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (line, msg) in &self.violations {
            out += &format!("line {line}: {msg}\n");
        }
        for line in &self.merged_lines {
            out += &format!("line {line}: overlapping hard labels merged\n");
        }
        out += &format!(
            "{} records, {} violations, {} merged\n",
            self.records,
            self.violations.len(),
            self.merged_lines.len()
        );
        out
    }
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<ValidationReport, CliError> {
    let ds = read_dataset(&args.input)?;
    Ok(ValidationReport {
        violations: ds
            .issues
            .iter()
            .map(|i| {
                let msg = match &i.id {
                    Some(id) => format!("{id}: {}", i.message),
                    None => i.message.clone(),
                };
                (i.line, msg)
            })
            .collect(),
        merged_lines: ds.merged_lines.clone(),
        records: ds.samples.len() + ds.issues.len(),
    })
}

pub fn cmd_mockgen(args: &MockgenArgs) -> Result<usize, CliError> {
    if args.langs.is_empty() || args.n < args.langs.len() {
        return Err(CliError::Config(format!(
            "--n {} is too small for {} languages",
            args.n,
            args.langs.len()
        )));
    }
    if !(0.0..=1.0).contains(&args.zero_fraction) {
        return Err(CliError::Config(format!(
            "--zero-fraction {} not in [0, 1]",
            args.zero_fraction
        )));
    }
    // the clean-sample count is exact over the whole corpus, not per language
    let k = args.langs.len();
    let n_clean = (args.zero_fraction * args.n as f64).round() as usize;
    let even = |total: usize, i: usize| total / k + usize::from(i < total % k);
    let mut samples = Vec::with_capacity(args.n);
    for (i, lang) in args.langs.iter().enumerate() {
        let share = even(args.n, i);
        let frac = even(n_clean, i).min(share) as f64 / share as f64;
        samples.extend(generate_planted_corpus(share, lang, args.seed, frac)?);
    }
    if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    write_dataset(&args.output, &samples)?;
    Ok(samples.len())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(args) => {
            let s = cmd_run(args)?;
            eprintln!(
                "{} samples, {} runs ({} failed), {} candidates dropped",
                s.samples, s.runs, s.failed_runs, s.dropped_candidates
            );
            for f in &s.files {
                println!("{}", f.display());
            }
        }
        Command::Score(args) => {
            for (path, report) in cmd_score(args)? {
                println!("{}", report.to_table(&path.display().to_string()));
            }
        }
        Command::Validate(args) => print!("{}", cmd_validate(args)?.render()),
        Command::Mockgen(args) => {
            let n = cmd_mockgen(args)?;
            eprintln!("wrote {n} samples to {}", args.output.display());
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("halspan: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! Command-line front end.
//!
//! Every command resolves one [`RunConfig`] (an optional TOML file plus flag
//! overrides), writes it to `<out-dir>/config.toml`, and then runs a single
//! library operation. Re-running with `--config <out-dir>/config.toml` and a
//! fresh `--out-dir` reproduces the same records byte for byte.
//!
//! Exit codes: 0 success, 2 usage error (bad flags, missing inputs, invalid
//! configuration), 1 runtime failure. Failures also print one JSON error
//! record on stderr.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, CorpusGenConfig, CorpusSplits};
use crate::error::Error;
use crate::jsonl;
use crate::metrics::{self, Histogram};
use crate::model::AcousticModel;
use crate::pipeline::{
    self, EstimateConfig, EstimateReport, FilterMode, IplConfig, IterationReport, SweepConfig, TeacherReport,
    ThresholdPoint,
};
use crate::pseudolabel::{self, PseudoLabel, ThresholdSchedule};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const CONFIG_FILE: &str = "config.toml";
pub const ITERATIONS_SCHEMA: &str = "ipl.iterations.v1";
pub const TEACHER_SCHEMA: &str = "ipl.teacher.v1";
pub const SWEEP_POINTS_SCHEMA: &str = "ipl.sweep-points.v1";
pub const SWEEP_SELECTION_SCHEMA: &str = "ipl.sweep-selection.v1";
pub const ESTIMATE_SCHEMA: &str = "ipl.estimate.v1";
pub const SCATTER_SCHEMA: &str = "ipl.score-wer.v1";
pub const HISTOGRAM_SCHEMA: &str = "ipl.histograms.v1";
pub const FILTER_SCHEMA: &str = "ipl.filter.v1";

/// Everything a command needs besides its output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Existing corpus manifest; when absent the corpus is generated from `[corpus]`.
    pub corpus_dir: Option<PathBuf>,
    /// Teacher checkpoint; when absent the teacher is trained.
    pub teacher: Option<PathBuf>,
    /// Model checkpoint for `pseudolabel` and `estimate-threshold`.
    pub model: Option<PathBuf>,
    /// Pseudo-label file for `filter`.
    pub pseudolabels: Option<PathBuf>,
    /// Run directories summarised by `report`.
    pub run_dirs: Vec<PathBuf>,
    pub corpus: CorpusGenConfig,
    pub ipl: IplConfig,
    pub sweep: SweepSettings,
    pub estimate: EstimateConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub max_thresholds: usize,
    pub restart_per_threshold: bool,
    /// Explicit schedule; when either is absent the schedule is derived from
    /// the teacher's scores on the unlabeled split.
    pub initial: Option<f64>,
    pub step: Option<f64>,
    /// Derived step = (10% quantile − 90% quantile) / divisions.
    pub divisions: usize,
    pub iterations_per_update: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        let sweep = SweepConfig::default();
        Self {
            max_thresholds: sweep.max_thresholds,
            restart_per_threshold: sweep.restart_per_threshold,
            initial: None,
            step: None,
            divisions: 10,
            iterations_per_update: 3,
        }
    }
}

impl SweepSettings {
    fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            max_thresholds: self.max_thresholds,
            restart_per_threshold: self.restart_per_threshold,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.corpus.validate()?;
        self.ipl.validate()?;
        if self.sweep.max_thresholds == 0 {
            return Err(Error::Config("sweep.max_thresholds must be >= 1".into()));
        }
        if self.sweep.divisions == 0 {
            return Err(Error::Config("sweep.divisions must be >= 1".into()));
        }
        if let (Some(initial), Some(step)) = (self.sweep.initial, self.sweep.step) {
            ThresholdSchedule::new(initial, step, self.sweep.iterations_per_update)?;
        }
        if !(0.0..=1.0).contains(&self.estimate.coverage) {
            return Err(Error::Config("estimate.coverage must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "ipl", version, about = "Confidence-filtered iterative pseudo-labeling on synthetic CTC corpora")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and write its manifest.
    GenCorpus(CommonArgs),
    /// Train the teacher on the labeled split.
    TrainTeacher(CommonArgs),
    /// Decode the unlabeled split with a model and score every hypothesis.
    Pseudolabel(ModelArgs),
    /// Apply exactly one filter to a pseudo-label file.
    Filter(FilterArgs),
    /// Run iterative pseudo-labeling.
    Ipl(IplArgs),
    /// Lower the score threshold until dev WER declines.
    Sweep(SweepArgs),
    /// Estimate the score threshold on the dev split.
    EstimateThreshold(ModelArgs),
    /// Summarise finished runs: tables, histograms, scatter pairs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Existing corpus manifest directory.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Write the summary to `<out-dir>/summary.txt` only.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Model checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("mode").multiple(false))]
pub struct FilterArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Pseudo-label file produced by `pseudolabel`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Keep items with score strictly above this boundary.
    #[arg(long, group = "mode", allow_negative_numbers = true)]
    pub score_boundary: Option<f64>,
    /// Keep items whose oracle WER is strictly below this value.
    #[arg(long, group = "mode")]
    pub max_wer: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FilterKind {
    None,
    Score,
    Schedule,
    OracleWer,
}

#[derive(Debug, Args)]
pub struct IplArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub filter: Option<FilterKind>,
    /// Score boundary (`score`) or initial threshold (`schedule`).
    #[arg(long, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    /// Threshold decrement for `schedule`.
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub max_wer: Option<f64>,
    #[arg(long)]
    pub iter_max: Option<usize>,
    /// Training epochs per iteration.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub initial: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub max_thresholds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Run directory to summarise; repeat to compare runs side by side.
    #[arg(long = "run-dir")]
    pub run_dirs: Vec<PathBuf>,
}

/// Failure classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

fn report_failure(f: &Failure) -> i32 {
    let (kind, message, code) = match f {
        Failure::Usage(m) => ("usage", m.clone(), EXIT_USAGE),
        Failure::Runtime(e) => (e.kind(), e.to_string(), EXIT_RUNTIME),
    };
    let record = ErrorRecord {
        error: kind,
        message,
        exit_code: code,
    };
    eprintln!("{}", serde_json::to_string(&record).expect("error record serializes"));
    code
}

/// Parse `args` (including the program name) and run the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            eprint!("{e}");
            report_failure(&Failure::Usage(e.kind().to_string()))
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let outcome = match &cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::TrainTeacher(a) => cmd_train_teacher(a),
        Command::Pseudolabel(a) => cmd_pseudolabel(a),
        Command::Filter(a) => cmd_filter(a),
        Command::Ipl(a) => cmd_ipl(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::EstimateThreshold(a) => cmd_estimate_threshold(a),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => report_failure(&f),
    }
}

// ---------------------------------------------------------------- resolution

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn existing(path: &Path, what: &str) -> Result<PathBuf, Failure> {
    fs::canonicalize(path).map_err(|_| usage(format!("{what} not found: {}", path.display())))
}

/// Load the config file (if any), apply the common overrides, and check that
/// every referenced input exists. `edit` applies command-specific overrides.
fn resolve(common: &CommonArgs, edit: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|_| usage(format!("config not found: {}", path.display())))?;
            RunConfig::from_toml(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.corpus {
        cfg.corpus_dir = Some(dir.clone());
    }
    edit(&mut cfg);
    cfg.ipl.seed = cfg.seed;
    cfg.ipl.train.seed = cfg.seed;

    let canon = |p: &mut Option<PathBuf>, what: &str| -> Result<(), Failure> {
        if let Some(path) = p.as_ref() {
            *p = Some(existing(path, what)?);
        }
        Ok(())
    };
    canon(&mut cfg.corpus_dir, "corpus directory")?;
    canon(&mut cfg.teacher, "teacher checkpoint")?;
    canon(&mut cfg.model, "model checkpoint")?;
    canon(&mut cfg.pseudolabels, "pseudo-label file")?;
    cfg.run_dirs = cfg
        .run_dirs
        .iter()
        .map(|d| existing(d, "run directory"))
        .collect::<Result<_, _>>()?;
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out_dir(out: &Path, cfg: &RunConfig) -> CmdResult {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_toml())
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_records<T: Serialize>(path: &Path, schema: &str, records: &[T]) -> CmdResult {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    jsonl::write(path, schema, records)?;
    Ok(())
}

fn save_model(model: &AcousticModel, path: &Path) -> CmdResult {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    model.save(path)?;
    Ok(())
}

/// The configured corpus: loaded from `corpus_dir`, or generated and saved
/// under `<out>/corpus` so the run is self-contained.
fn obtain_corpus(cfg: &RunConfig, out: &Path) -> Result<CorpusSplits, Failure> {
    match &cfg.corpus_dir {
        Some(dir) => Ok(corpus::load_manifest(dir)?),
        None => {
            let splits = corpus::generate_corpus(&cfg.corpus, cfg.seed)?;
            corpus::save_manifest(&splits, &out.join("corpus"))?;
            Ok(splits)
        }
    }
}

fn obtain_teacher(cfg: &RunConfig, splits: &CorpusSplits, out: &Path) -> Result<AcousticModel, Failure> {
    let teacher = match &cfg.teacher {
        Some(path) => AcousticModel::load(path)?,
        None => {
            let (model, report) = pipeline::train_teacher(splits, &cfg.ipl)?;
            write_records(&out.join("teacher.jsonl"), TEACHER_SCHEMA, &[report])?;
            model
        }
    };
    save_model(&teacher, &out.join("models").join("teacher.json"))?;
    Ok(teacher)
}

fn required_model(cfg: &RunConfig) -> Result<AcousticModel, Failure> {
    let path = cfg
        .model
        .as_ref()
        .ok_or_else(|| usage("a model checkpoint is required (--model or `model` in the config)"))?;
    Ok(AcousticModel::load(path)?)
}

fn finish(common: &CommonArgs, summary: &str) -> CmdResult {
    write_text(&common.out_dir.join("summary.txt"), summary)?;
    if !common.quiet {
        print!("{summary}");
    }
    Ok(())
}

// ------------------------------------------------------------------ commands

pub fn cmd_gen_corpus(args: &CommonArgs) -> CmdResult {
    let cfg = resolve(args, |_| {})?;
    prepare_out_dir(&args.out_dir, &cfg)?;
    let splits = corpus::generate_corpus(&cfg.corpus, cfg.seed)?;
    let dir = args.out_dir.join("corpus");
    corpus::save_manifest(&splits, &dir)?;
    let mut s = String::new();
    writeln!(s, "corpus        corpus/").unwrap();
    writeln!(s, "vocabulary    {} tokens + blank", splits.vocab.len()).unwrap();
    writeln!(s, "feature dim   {}", splits.feature_dim()).unwrap();
    for (name, n) in [
        ("labeled", splits.labeled.len()),
        ("unlabeled", splits.unlabeled.len()),
        ("dev", splits.dev.len()),
        ("test", splits.test.len()),
    ] {
        writeln!(s, "{name:<13} {n}").unwrap();
    }
    finish(args, &s)
}

pub fn cmd_train_teacher(args: &CommonArgs) -> CmdResult {
    let cfg = resolve(args, |_| {})?;
    prepare_out_dir(&args.out_dir, &cfg)?;
    let splits = obtain_corpus(&cfg, &args.out_dir)?;
    let (model, report) = pipeline::train_teacher(&splits, &cfg.ipl)?;
    save_model(&model, &args.out_dir.join("models").join("teacher.json"))?;
    write_records(&args.out_dir.join("teacher.jsonl"), TEACHER_SCHEMA, std::slice::from_ref(&report))?;
    finish(args, &teacher_summary(&report))
}

fn teacher_summary(r: &TeacherReport) -> String {
    format!(
        "teacher  epochs {}  final loss {}  dev WER {:.4}  test WER {:.4}\n",
        r.loss_curve.len(),
        r.loss_curve.last().map_or("-".into(), |l| format!("{l:.4}")),
        r.dev_wer,
        r.test_wer
    )
}

pub fn cmd_pseudolabel(args: &ModelArgs) -> CmdResult {
    let cfg = resolve(&args.common, |c| {
        if let Some(m) = &args.model {
            c.model = Some(m.clone());
        }
    })?;
    let out = &args.common.out_dir;
    prepare_out_dir(out, &cfg)?;
    let model = required_model(&cfg)?;
    let splits = obtain_corpus(&cfg, out)?;
    let pl = pseudolabel::generate_pseudolabels(&model, &splits.unlabeled, cfg.ipl.score)?;
    pseudolabel::save_pseudolabels(&out.join("pseudolabels.jsonl"), &pl)?;
    let mean = pl.iter().map(|p| p.score).sum::<f64>() / pl.len().max(1) as f64;
    finish(&args.common, &format!("pseudo-labels {}  mean score {mean:.4}\n", pl.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub mode: String,
    pub parameter: f64,
    pub total: usize,
    pub kept: usize,
    pub rejected: usize,
}

pub fn cmd_filter(args: &FilterArgs) -> CmdResult {
    let cfg = resolve(&args.common, |c| {
        if let Some(p) = &args.input {
            c.pseudolabels = Some(p.clone());
        }
        if let Some(b) = args.score_boundary {
            c.ipl.filter = FilterMode::Score { boundary: b };
        }
        if let Some(w) = args.max_wer {
            c.ipl.filter = FilterMode::OracleWer { max_wer: w };
        }
    })?;
    let input = cfg
        .pseudolabels
        .clone()
        .ok_or_else(|| usage("a pseudo-label file is required (--input or `pseudolabels` in the config)"))?;
    let out = &args.common.out_dir;
    let mut pl = pseudolabel::load_pseudolabels(&input)?;
    let (kept, mode, parameter) = match &cfg.ipl.filter {
        FilterMode::Score { boundary } => {
            prepare_out_dir(out, &cfg)?;
            (pseudolabel::score_filter(&pl, *boundary), "score", *boundary)
        }
        FilterMode::OracleWer { max_wer } => {
            let dir = cfg
                .corpus_dir
                .as_ref()
                .ok_or_else(|| usage("the WER filter needs --corpus for the oracle transcripts"))?;
            prepare_out_dir(out, &cfg)?;
            let splits = corpus::load_manifest(dir)?;
            (pseudolabel::wer_filter(&mut pl, &splits.unlabeled_truth, *max_wer)?, "oracle_wer", *max_wer)
        }
        _ => return Err(usage("exactly one filter mode is required: --score-boundary or --max-wer")),
    };
    pseudolabel::save_pseudolabels(&out.join("kept.jsonl"), &kept)?;
    let record = FilterRecord {
        mode: mode.into(),
        parameter,
        total: pl.len(),
        kept: kept.len(),
        rejected: pl.len() - kept.len(),
    };
    write_records(&out.join("filter.jsonl"), FILTER_SCHEMA, std::slice::from_ref(&record))?;
    finish(
        &args.common,
        &format!(
            "filter {mode} {parameter}  kept {} of {}  rejected {}\n",
            record.kept, record.total, record.rejected
        ),
    )
}

pub fn cmd_ipl(args: &IplArgs) -> CmdResult {
    let mut bad = None;
    let cfg = resolve(&args.common, |c| {
        if let Some(t) = &args.teacher {
            c.teacher = Some(t.clone());
        }
        if let Some(n) = args.iter_max {
            c.ipl.iter_max = n;
        }
        if let Some(e) = args.epochs {
            c.ipl.train.epochs_per_iter = e;
        }
        if let Some(kind) = args.filter {
            c.ipl.filter = match kind {
                FilterKind::None => FilterMode::None,
                FilterKind::Score => match args.threshold {
                    Some(boundary) => FilterMode::Score { boundary },
                    None => {
                        bad = Some("--filter score needs --threshold");
                        return;
                    }
                },
                FilterKind::Schedule => match (args.threshold, args.step) {
                    (Some(initial), Some(step)) => FilterMode::Schedule {
                        schedule: ThresholdSchedule {
                            initial,
                            step,
                            updates_so_far: 0,
                            iterations_per_update: c.sweep.iterations_per_update,
                        },
                    },
                    _ => {
                        bad = Some("--filter schedule needs --threshold and --step");
                        return;
                    }
                },
                FilterKind::OracleWer => FilterMode::OracleWer {
                    max_wer: args.max_wer.unwrap_or(0.1),
                },
            };
        }
    })?;
    if let Some(msg) = bad {
        return Err(usage(msg));
    }
    let out = &args.common.out_dir;
    prepare_out_dir(out, &cfg)?;
    let splits = obtain_corpus(&cfg, out)?;
    let teacher = obtain_teacher(&cfg, &splits, out)?;
    let teacher_dev = pipeline::evaluate(&teacher, &splits.dev)?;
    let teacher_test = pipeline::evaluate(&teacher, &splits.test)?;
    let run = pipeline::run_ipl_with(&splits, &cfg.ipl, Some(&teacher), &mut |a| save_iteration(out, a))?;
    write_records(&out.join("iterations.jsonl"), ITERATIONS_SCHEMA, &run.reports)?;
    save_model(&run.model, &out.join("models").join("final.json"))?;
    finish(&args.common, &iteration_table(teacher_dev, teacher_test, &run.reports))
}

fn into_error(f: Failure) -> Error {
    match f {
        Failure::Usage(m) => Error::Config(m),
        Failure::Runtime(e) => e,
    }
}

fn iteration_model_path(out: &Path, t: usize) -> PathBuf {
    out.join("models").join(format!("iter-{t:03}.json"))
}

fn iteration_pseudolabel_path(out: &Path, t: usize) -> PathBuf {
    out.join("pseudolabels").join(format!("iter-{t:03}.jsonl"))
}

fn save_iteration(out: &Path, a: &pipeline::IterationArtifacts<'_>) -> crate::Result<()> {
    save_model(a.model, &iteration_model_path(out, a.report.iteration)).map_err(into_error)?;
    let path = iteration_pseudolabel_path(out, a.report.iteration);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    pseudolabel::save_pseudolabels(&path, a.pseudolabels)
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn iteration_table(teacher_dev: f64, teacher_test: f64, reports: &[IterationReport]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:>4}  {:<10} {:>9} {:>7} {:>9} {:>12} {:>8} {:>8}",
        "iter", "filter", "threshold", "kept", "generated", "oracle WER", "dev WER", "test WER"
    )
    .unwrap();
    writeln!(
        s,
        "{:>4}  {:<10} {:>9} {:>7} {:>9} {:>12} {:>8.4} {:>8.4}",
        0, "teacher", "-", "-", "-", "-", teacher_dev, teacher_test
    )
    .unwrap();
    for r in reports {
        writeln!(
            s,
            "{:>4}  {:<10} {:>9} {:>7} {:>9} {:>12} {:>8.4} {:>8.4}{}",
            r.iteration,
            r.filter,
            opt(r.threshold),
            r.kept,
            r.generated,
            opt(r.oracle_wer_kept),
            r.dev_wer,
            r.test_wer,
            if r.empty_kept { "  (nothing kept)" } else { "" }
        )
        .unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSelectionRecord {
    pub schedule: ThresholdSchedule,
    pub best_threshold: f64,
    pub best_index: usize,
    pub declined: bool,
    pub exhausted_without_decline: bool,
}

pub fn cmd_sweep(args: &SweepArgs) -> CmdResult {
    let cfg = resolve(&args.common, |c| {
        if let Some(t) = &args.teacher {
            c.teacher = Some(t.clone());
        }
        if args.initial.is_some() {
            c.sweep.initial = args.initial;
        }
        if args.step.is_some() {
            c.sweep.step = args.step;
        }
        if let Some(n) = args.max_thresholds {
            c.sweep.max_thresholds = n;
        }
    })?;
    let out = &args.common.out_dir;
    prepare_out_dir(out, &cfg)?;
    let splits = obtain_corpus(&cfg, out)?;
    let teacher = obtain_teacher(&cfg, &splits, out)?;
    let schedule = match (cfg.sweep.initial, cfg.sweep.step) {
        (Some(initial), Some(step)) => ThresholdSchedule::new(initial, step, cfg.sweep.iterations_per_update)?,
        _ => pipeline::schedule_from_teacher(
            &teacher,
            &splits,
            cfg.ipl.score,
            cfg.sweep.divisions,
            cfg.sweep.iterations_per_update,
        )?,
    };
    let outcome = pipeline::sweep_threshold_with(
        &splits,
        &cfg.ipl,
        &schedule,
        &cfg.sweep.sweep_config(),
        Some(&teacher),
        &mut |a| save_iteration(out, a),
    )?;
    write_records(&out.join("iterations.jsonl"), ITERATIONS_SCHEMA, &outcome.reports)?;
    write_records(&out.join("points.jsonl"), SWEEP_POINTS_SCHEMA, &outcome.points)?;
    let selection = SweepSelectionRecord {
        schedule,
        best_threshold: outcome.best_threshold,
        best_index: outcome.selection.index,
        declined: outcome.selection.declined,
        exhausted_without_decline: outcome.exhausted_without_decline,
    };
    write_records(&out.join("selection.jsonl"), SWEEP_SELECTION_SCHEMA, std::slice::from_ref(&selection))?;
    finish(&args.common, &sweep_table(&outcome.points, &selection))
}

fn sweep_table(points: &[ThresholdPoint], sel: &SweepSelectionRecord) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:>9} {:>12} {:>9} {:>9} {:>10}",
        "threshold", "best dev WER", "best iter", "test WER", "mean kept"
    )
    .unwrap();
    for (i, p) in points.iter().enumerate() {
        writeln!(
            s,
            "{:>9.4} {:>12.4} {:>9} {:>9.4} {:>10.1}{}",
            p.threshold,
            p.best_dev_wer,
            p.best_iteration,
            p.test_wer_at_best,
            p.mean_kept,
            if i == sel.best_index { "  *" } else { "" }
        )
        .unwrap();
    }
    if sel.exhausted_without_decline {
        writeln!(s, "warning: no decline within the schedule; the last threshold was returned").unwrap();
    }
    writeln!(s, "selected threshold {:.4}", sel.best_threshold).unwrap();
    s
}

pub fn cmd_estimate_threshold(args: &ModelArgs) -> CmdResult {
    let cfg = resolve(&args.common, |c| {
        if let Some(m) = &args.model {
            c.model = Some(m.clone());
        }
    })?;
    let out = &args.common.out_dir;
    prepare_out_dir(out, &cfg)?;
    let model = required_model(&cfg)?;
    let splits = obtain_corpus(&cfg, out)?;
    let (_, report) = pipeline::estimate_threshold(&model, &splits.dev, &cfg.estimate)?;
    write_records(&out.join("estimate.jsonl"), ESTIMATE_SCHEMA, std::slice::from_ref(&report))?;
    write_records(&out.join("scatter.jsonl"), SCATTER_SCHEMA, &report.pairs)?;
    finish(&args.common, &estimate_summary(&report))
}

fn estimate_summary(r: &EstimateReport) -> String {
    let mut s = String::new();
    writeln!(s, "estimated threshold  {:.4}{}", r.threshold, if r.feasible { "" } else { "  (infeasible)" }).unwrap();
    writeln!(s, "probe size           {}", r.probe_size).unwrap();
    writeln!(s, "WER-kept             {}", r.wer_kept).unwrap();
    writeln!(s, "score-kept           {}", r.score_kept).unwrap();
    writeln!(s, "intersection         {}", r.intersection).unwrap();
    writeln!(s, "jaccard              {:.4}", r.jaccard).unwrap();
    writeln!(s, "min ratio            {:.4}", r.min_ratio).unwrap();
    writeln!(s, "random jaccard       {:.4}", r.random_jaccard).unwrap();
    s
}

/// Per-iteration score and oracle-WER distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRecord {
    pub run: String,
    pub iteration: usize,
    pub score: Option<Histogram>,
    pub wer: Option<Histogram>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRecord {
    pub run: String,
    pub iteration: usize,
    pub id: String,
    pub score: f64,
    pub wer: Option<f64>,
}

pub fn cmd_report(args: &ReportArgs) -> CmdResult {
    let cfg = resolve(&args.common, |c| {
        if !args.run_dirs.is_empty() {
            c.run_dirs = args.run_dirs.clone();
        }
    })?;
    if cfg.run_dirs.is_empty() {
        return Err(usage("at least one --run-dir is required"));
    }
    let out = &args.common.out_dir;
    prepare_out_dir(out, &cfg)?;
    let n_bins = cfg.estimate.n_bins;
    let mut summary = String::new();
    let mut comparison = Vec::new();
    let mut histograms = Vec::new();
    let mut scatter = Vec::new();
    for (i, dir) in cfg.run_dirs.iter().enumerate() {
        let name = format!("run{i}");
        writeln!(summary, "== {name}: {}", dir.display()).unwrap();
        let iterations = dir.join("iterations.jsonl");
        let estimate = dir.join("estimate.jsonl");
        if iterations.exists() {
            let reports: Vec<IterationReport> = jsonl::read(&iterations, ITERATIONS_SCHEMA)?;
            let teacher = read_teacher_wer(dir)?;
            summary.push_str(&iteration_table(teacher.0, teacher.1, &reports));
            let points = dir.join("points.jsonl");
            if points.exists() {
                let pts: Vec<ThresholdPoint> = jsonl::read(&points, SWEEP_POINTS_SCHEMA)?;
                let sel: Vec<SweepSelectionRecord> = jsonl::read(&dir.join("selection.jsonl"), SWEEP_SELECTION_SCHEMA)?;
                let sel = sel
                    .first()
                    .ok_or_else(|| Failure::Runtime(Error::Validation("empty sweep selection".into())))?;
                summary.push('\n');
                summary.push_str(&sweep_table(&pts, sel));
            }
            if let Some(best) = reports.iter().min_by(|a, b| a.dev_wer.total_cmp(&b.dev_wer)) {
                comparison.push((name.clone(), teacher, best.clone()));
            }
            for r in &reports {
                let path = iteration_pseudolabel_path(dir, r.iteration);
                if !path.exists() {
                    continue;
                }
                let pl = pseudolabel::load_pseudolabels(&path)?;
                histograms.push(pseudolabel_histograms(&name, r.iteration, &pl, n_bins)?);
                scatter.extend(pl.iter().map(|p| ScatterRecord {
                    run: name.clone(),
                    iteration: r.iteration,
                    id: p.id.clone(),
                    score: p.score,
                    wer: p.oracle_wer,
                }));
            }
        } else if estimate.exists() {
            let reports: Vec<EstimateReport> = jsonl::read(&estimate, ESTIMATE_SCHEMA)?;
            for r in &reports {
                summary.push_str(&estimate_summary(r));
                histograms.push(HistogramRecord {
                    run: name.clone(),
                    iteration: 0,
                    score: Some(r.score_histogram.clone()),
                    wer: Some(r.wer_histogram.clone()),
                });
                scatter.extend(r.pairs.iter().map(|p| ScatterRecord {
                    run: name.clone(),
                    iteration: 0,
                    id: p.id.clone(),
                    score: p.score,
                    wer: p.wer.is_finite().then_some(p.wer),
                }));
            }
        } else {
            return Err(usage(format!(
                "{} holds neither iteration nor estimate records",
                dir.display()
            )));
        }
        summary.push('\n');
    }
    if comparison.len() > 1 {
        writeln!(summary, "== comparison (best dev iteration per run)").unwrap();
        writeln!(
            summary,
            "{:<6} {:<10} {:>9} {:>11} {:>12} {:>8} {:>8}",
            "run", "filter", "threshold", "teacher dev", "oracle WER", "dev WER", "test WER"
        )
        .unwrap();
        for (name, (tdev, _), r) in &comparison {
            writeln!(
                summary,
                "{:<6} {:<10} {:>9} {:>11.4} {:>12} {:>8.4} {:>8.4}",
                name,
                r.filter,
                opt(r.threshold),
                tdev,
                opt(r.oracle_wer_kept),
                r.dev_wer,
                r.test_wer
            )
            .unwrap();
        }
    }
    write_records(&out.join("histograms.jsonl"), HISTOGRAM_SCHEMA, &histograms)?;
    write_records(&out.join("scatter.jsonl"), SCATTER_SCHEMA, &scatter)?;
    finish(&args.common, &summary)
}

/// Teacher dev/test WER of a run: from its teacher record when it trained one,
/// otherwise by evaluating its saved teacher checkpoint on its corpus.
fn read_teacher_wer(dir: &Path) -> Result<(f64, f64), Failure> {
    let recorded = dir.join("teacher.jsonl");
    if recorded.exists() {
        let r: Vec<TeacherReport> = jsonl::read(&recorded, TEACHER_SCHEMA)?;
        if let Some(r) = r.first() {
            return Ok((r.dev_wer, r.test_wer));
        }
    }
    let text = fs::read_to_string(dir.join(CONFIG_FILE)).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
    let run_cfg = RunConfig::from_toml(&text).map_err(|e| Failure::Runtime(Error::Validation(e)))?;
    let splits = match &run_cfg.corpus_dir {
        Some(c) => corpus::load_manifest(c)?,
        None => corpus::load_manifest(&dir.join("corpus"))?,
    };
    let teacher = AcousticModel::load(&dir.join("models").join("teacher.json"))?;
    Ok((pipeline::evaluate(&teacher, &splits.dev)?, pipeline::evaluate(&teacher, &splits.test)?))
}

fn pseudolabel_histograms(run: &str, iteration: usize, pl: &[PseudoLabel], n_bins: usize) -> Result<HistogramRecord, Failure> {
    let scores: Vec<f64> = pl.iter().map(|p| p.score).collect();
    let wers: Vec<f64> = pl.iter().filter_map(|p| p.oracle_wer).filter(|w| w.is_finite()).collect();
    let hist = |v: &[f64]| -> Result<Option<Histogram>, Failure> {
        if v.is_empty() {
            Ok(None)
        } else {
            Ok(Some(metrics::histogram(v, n_bins)?))
        }
    };
    Ok(HistogramRecord {
        run: run.into(),
        iteration,
        score: hist(&scores)?,
        wer: hist(&wers)?,
    })
}

//! The `brewclip` command line: dataset generation, stand-in pretraining,
//! fine-tuning and the evaluation reports.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use brewclip_core::data::DatasetStyle;
use brewclip_core::eval::{RecallRule, TextSource};
use brewclip_core::model::ModelMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Failure classes, each with a stable exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Data(_) => EXIT_DATA,
            Self::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Data(m) => write!(f, "data error: {m}"),
            Self::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<brewclip_core::Error> for CliError {
    fn from(e: brewclip_core::Error) -> Self {
        use brewclip_core::Error as E;
        match e {
            E::Numeric(_) => Self::Numeric(e.to_string()),
            E::InvalidArgument(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "brewclip", version, about = "Dual-channel speech/image retrieval experiments")]
pub struct Cli {
    /// JSON run configuration; fields left out take the desk defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset and transcribe it.
    GenData(GenDataArgs),
    /// Pretrain the image and text stand-in encoders.
    Pretrain(PretrainArgs),
    /// Fine-tune one model variant on top of frozen encoders.
    Train(TrainArgs),
    /// Retrieval report on a dataset split.
    Eval(EvalArgs),
    /// Linear mood probe on frozen features.
    ProbeSer(ProbeArgs),
    /// Logistic fit of per-sample hits against WER.
    AnalyzeWer(AnalyzeWerArgs),
    /// Every checkpoint against every dataset.
    CrossEval(CrossEvalArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StyleArg {
    Scripted,
    Unscripted,
    MoodAware,
}

impl From<StyleArg> for DatasetStyle {
    fn from(s: StyleArg) -> Self {
        match s {
            StyleArg::Scripted => Self::Scripted,
            StyleArg::Unscripted => Self::Unscripted,
            StyleArg::MoodAware => Self::MoodAware,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Full,
    PipelinePrompted,
    PipelineZeroShot,
    E2eOnly,
}

impl From<ModeArg> for ModelMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => Self::Full,
            ModeArg::PipelinePrompted => Self::PipelinePrompted,
            ModeArg::PipelineZeroShot => Self::PipelineZeroShot,
            ModeArg::E2eOnly => Self::E2eOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SourceArg {
    Asr,
    GroundTruth,
}

impl From<SourceArg> for TextSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Asr => Self::Asr,
            SourceArg::GroundTruth => Self::GroundTruth,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RuleArg {
    AnyCaption,
    PerCaption,
}

impl From<RuleArg> for RecallRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::AnyCaption => Self::AnyCaption,
            RuleArg::PerCaption => Self::PerCaption,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FeaturesArg {
    Acoustic,
    Text,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub style: StyleArg,
    #[arg(long)]
    pub n_images: usize,
    #[arg(long = "captions", default_value_t = 5)]
    pub captions_per_image: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// ASR stand-in settings; default to the configured ones.
    #[arg(long)]
    pub target_wer: Option<f64>,
    #[arg(long)]
    pub wer_jitter: Option<f64>,
    #[arg(long)]
    pub crash_prob: Option<f64>,
    #[arg(long)]
    pub drop_filler_prob: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset files whose training splits form the corpus.
    #[arg(long, num_args = 1.., required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    /// Loss log, one row every 50 steps.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Checkpoint holding the frozen encoders.
    #[arg(long)]
    pub frozen: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub eval_interval: Option<u64>,
    /// Loss log, one row every 50 steps.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the checkpoint's mode (zero-shot for frozen checkpoints).
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum, default_value = "asr")]
    pub text_source: SourceArg,
    #[arg(long, value_enum, default_value = "any-caption")]
    pub recall_rule: RuleArg,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub out_json: PathBuf,
    #[arg(long)]
    pub out_csv: PathBuf,
    /// Per-sample outcomes for analyze-wer.
    #[arg(long)]
    pub samples: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "acoustic")]
    pub features: FeaturesArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeWerArgs {
    /// Per-sample CSV written by `eval --samples`.
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CrossEvalArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "asr")]
    pub text_source: SourceArg,
    #[arg(long)]
    pub out: PathBuf,
}

/// Worker threads from `BFRC_THREADS`, 1 when unset.
pub fn threads() -> CliResult<usize> {
    match std::env::var("BFRC_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("BFRC_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("brewclip: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            brewclip_core::Error::Io(_) => CliError::Data(format!("{}: {e}", p.display())),
            other => CliError::Usage(format!("{}: {other}", p.display())),
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let threads = threads()?;
    match &cli.command {
        Command::GenData(a) => commands::gen_data(&mut cfg, a),
        Command::Pretrain(a) => commands::pretrain(&mut cfg, a),
        Command::Train(a) => commands::train(&mut cfg, a, threads),
        Command::Eval(a) => commands::eval(&mut cfg, a, threads),
        Command::ProbeSer(a) => commands::probe_ser(&mut cfg, a, threads),
        Command::AnalyzeWer(a) => commands::analyze_wer(&cfg, a),
        Command::CrossEval(a) => commands::cross_eval(&mut cfg, a, threads),
    }
}

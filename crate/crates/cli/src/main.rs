//! `offscan`: embed images, evaluate and tune prompts, audit a dataset,
//! report on the audit, and serve it for human review.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or processing error.

mod commands;
mod manifest;
mod synth;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use offscan_core::eval::EvalMode;
use offscan_core::prompt::EarlyStopMetric;
use offscan_core::smid::Thresholds;

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "offscan", version, about = "Find offensive images in datasets with prompt-tuned vision-language embeddings")]
pub struct Cli {
    /// Threads for every internal pool (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    /// Where to write the run manifest instead of the command's default.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode every image under a directory into an embedding cache.
    Embed(EmbedArgs),
    /// Cross-validate zero-shot, tuned or linear-probe classification on rated images.
    Eval(EvalArgs),
    /// Score every embedding and write an audit run directory.
    Scan(ScanArgs),
    /// Per-class counts and top flagged exemplars of an audit.
    Report(ReportArgs),
    /// Serve audit runs over HTTP for review.
    Serve(ServeArgs),
    /// 2-D PCA projection of a cache, for plotting.
    Project(ProjectArgs),
    /// Generate a synthetic image tree with a known planted set.
    Synth(SynthArgs),
    /// Re-execute the command recorded in a run manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Encoder config (TOML, or JSON by extension).
    #[arg(long)]
    pub backend: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Glob over root-relative ids; repeatable. Default: known image extensions.
    #[arg(long)]
    pub include: Vec<String>,
    /// Exit 0 even when some files fail to decode.
    #[arg(long)]
    pub allow_partial: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub ratings: PathBuf,
    #[arg(long, default_value = "id")]
    pub id_column: String,
    #[arg(long, default_value = "moral_mean")]
    pub rating_column: String,
    /// Column holding the cache key, when it differs from the id.
    #[arg(long)]
    pub path_column: Option<String>,
    /// `standard`, `strong`, or `NEG,POS`.
    #[arg(long, default_value = "standard", value_parser = parse_thresholds)]
    pub thresholds: Thresholds,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<EvalMode>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Eval settings file (TOML or JSON); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Initial prompt set. Otherwise built zero-shot from --backend, or random.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub backend: Option<PathBuf>,
    #[arg(long, default_value = offscan_core::prompt::DEFAULT_TEMPLATE)]
    pub template: String,
    /// `NON_OFFENSIVE,OFFENSIVE` label words.
    #[arg(long, conflicts_with = "label_preset")]
    pub labels: Option<String>,
    #[arg(long)]
    pub label_preset: Option<String>,
    /// Temperature of zero-shot or random initial prompts.
    #[arg(long, default_value_t = offscan_core::prompt::DEFAULT_TEMPERATURE)]
    pub temperature: f64,

    /// Learning curve over these training fractions instead of CV.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Also tune on all rated images and save the prompts here.
    #[arg(long)]
    pub prompts_out: Option<PathBuf>,

    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, value_parser = parse_early_stop)]
    pub early_stop: Option<EarlyStopMetric>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    pub cache: Option<PathBuf>,
    /// Encode this directory instead of reading a cache; needs --backend.
    #[arg(long, requires = "backend")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub backend: Option<PathBuf>,
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, default_value_t = offscan_core::audit::DEFAULT_FLAG_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Where image ids resolve; defaults to the cache's source root.
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Reference cache for nearest-neighbor evidence.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub audit: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub top: usize,
    /// Top K per class directory instead of overall.
    #[arg(long)]
    pub by_class: bool,
    /// Summary to check totals against; `summary.json` beside the audit by default.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// JSON output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long = "audit-dir", required = true)]
    pub audit_dirs: Vec<PathBuf>,
    /// Prompt set to register and activate on every run.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: String,
    #[arg(long)]
    pub cors_origin: Option<String>,
    #[arg(long, default_value_t = offscan_service::DEFAULT_MIN_VERDICTS)]
    pub min_verdicts: usize,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub components: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 120)]
    pub images: usize,
    #[arg(long, default_value_t = 30)]
    pub planted: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub dimension: usize,
    #[arg(long, default_value_t = 0.9)]
    pub semantic_weight: f64,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    pub manifest_file: PathBuf,
}

fn parse_thresholds(s: &str) -> Result<Thresholds, String> {
    match s {
        "standard" => Ok(Thresholds::STANDARD),
        "strong" => Ok(Thresholds::STRONG),
        _ => {
            let (a, b) = s
                .split_once(',')
                .ok_or_else(|| format!("expected standard, strong or NEG,POS; got {s:?}"))?;
            let parse = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
            Thresholds::new(parse(a)?, parse(b)?).map_err(|e| e.to_string())
        }
    }
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    s.parse().map_err(|e: offscan_core::Error| e.to_string())
}

fn parse_early_stop(s: &str) -> Result<EarlyStopMetric, String> {
    match s {
        "accuracy" => Ok(EarlyStopMetric::Accuracy),
        "loss" => Ok(EarlyStopMetric::Loss),
        _ => Err(format!("expected accuracy or loss, got {s:?}")),
    }
}

/// Maps an error chain onto the exit-code contract.
fn exit_code(err: &anyhow::Error) -> u8 {
    use offscan_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidArgument(_)
                | E::Config(_)
                | E::BadTemplate(_)
                | E::TooFewFolds(_)
                | E::InvalidThresholds { .. } => 1,
                _ => 2,
            };
        }
    }
    2
}

/// Runs an already-parsed command line; `args` is what gets recorded.
pub fn execute(cli: &Cli, args: &[String]) -> anyhow::Result<()> {
    if cli.workers > 0 {
        // Fails harmlessly when a pool already exists (e.g. under rerun).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global();
    }
    commands::dispatch(cli, args)
}

pub fn parse(args: &[String]) -> Result<Cli, clap::Error> {
    Cli::try_parse_from(std::iter::once("offscan").chain(args.iter().map(String::as_str)))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match parse(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match execute(&cli, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

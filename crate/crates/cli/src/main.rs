//! `mtree`: synthesize, preprocess, train, evaluate, ablate, explain and report.

mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{FileConfig, Overrides, RunConfig, DATA_ROOT_ENV};

/// Failure classes, each with its own exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    MissingData(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 3,
            CliError::MissingData(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Other(_) => "runtime",
            CliError::Config(_) => "config",
            CliError::MissingData(_) => "missing-data",
        }
    }
}

impl From<mtree_core::Error> for CliError {
    fn from(e: mtree_core::Error) -> Self {
        use mtree_core::Error as E;
        let mut root = &e;
        while let E::Fold { source, .. } = root {
            root = source;
        }
        match root {
            E::Config(_) => CliError::Config(e.to_string()),
            E::CorpusIncomplete(_) => CliError::MissingData(e.to_string()),
            E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => CliError::MissingData(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mtree", version, about = "Multi-class EEG + eye-movement target decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration with optional [paths], [synth], [preprocess] and [train] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset root.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Task id (A, B or C).
    #[arg(long, global = true)]
    task: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Worker threads for fold and arm runs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus in the raw layout.
    Synth {
        /// Also write preprocessed-equivalent trial files.
        #[arg(long)]
        trials: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Filter, resample and epoch raw blocks into trial files.
    Preprocess {
        #[command(flatten)]
        common: Common,
    },
    /// Nested cross-validation of the full model.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Re-evaluate the checkpoints of a training run on their test blocks.
    Evaluate {
        /// Training output directory.
        #[arg(long)]
        run: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Cross-validate the full model and its five ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Input-gradient saliency of a training run's models.
    Saliency {
        #[arg(long)]
        run: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Render confusion matrices, saliency plots and a summary table.
    Report {
        /// Report JSON; defaults to <run>/report.json.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
        /// Saliency JSON; defaults to <run>/saliency.json when present.
        #[arg(long)]
        saliency: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, default_out: &str) -> Result<RunConfig, CliError> {
    let file = match &common.config {
        Some(p) => FileConfig::from_path(p)?,
        None => FileConfig::default(),
    };
    if let Some(n) = common.jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be positive".into()));
        }
        mtree_core::exec::init_workers(n);
    }
    let o = Overrides {
        data: common.data.clone(),
        out: common.out.clone(),
        task: common.task.clone(),
        seed: common.seed,
        epochs: common.epochs,
    };
    RunConfig::resolve(file, o, default_out)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { trials, common } => commands::synth(&resolve(&common, "data")?, trials),
        Command::Preprocess { common } => commands::preprocess(&resolve(&common, "trials")?),
        Command::Train { common } => commands::train(&resolve(&common, "runs/train")?).map(drop),
        Command::Ablate { common } => commands::ablate(&resolve(&common, "runs/ablate")?).map(drop),
        Command::Evaluate { run, common } => {
            let cfg = resolve(&common, "runs/train")?;
            let run = run.unwrap_or_else(|| cfg.out.clone());
            commands::evaluate(&cfg, &run).map(drop)
        }
        Command::Saliency { run, common } => {
            let cfg = resolve(&common, "runs/train")?;
            let run = run.unwrap_or_else(|| cfg.out.clone());
            commands::saliency(&cfg, &run).map(drop)
        }
        Command::Report {
            report,
            run,
            saliency,
            common,
        } => {
            let cfg = resolve(&common, "runs/train")?;
            let run = run.unwrap_or_else(|| cfg.out.clone());
            let report = report.unwrap_or_else(|| run.join(commands::REPORT_FILE));
            let saliency = saliency.or_else(|| Some(run.join(commands::SALIENCY_FILE)).filter(|p| p.is_file()));
            let out = common.out.clone().unwrap_or_else(|| run.join("figures"));
            commands::report(&report, saliency.as_deref(), &out).map(drop)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mtree: error[{}]: {e}", e.kind());
            ExitCode::from(e.code())
        }
    }
}

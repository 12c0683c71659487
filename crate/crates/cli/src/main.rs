use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stdgan_core::baselines::BaselineMethod;

mod commands;
mod config;
mod plot;

/// Failure classes, each with its own exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] stdgan_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use stdgan_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::Config(_) | E::UnknownDomain { .. } | E::DomainPair(_)) => 2,
            CliError::Core(e) if e.is_data_error() => 3,
            CliError::Core(E::Io { .. } | E::Json(_)) => 3,
            CliError::Core(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "stdgan",
    version,
    about = "Multi-domain image standardization pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run configuration shared by the training commands.
#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set gan.num_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start from the reduced CPU-sized presets.
    #[arg(long)]
    pub desk_scale: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Method {
    Zscore,
    Grayworld,
    Histeq,
}

impl From<Method> for BaselineMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Zscore => BaselineMethod::ZScore,
            Method::Grayworld => BaselineMethod::GrayWorld,
            Method::Histeq => BaselineMethod::HistEq,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled multi-domain synthetic dataset.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        domains: usize,
        #[arg(long, default_value_t = 8)]
        images: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long)]
        force: bool,
    },
    /// Train the translation network; resumes an interrupted run with `--resume`.
    TrainGan {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, conflicts_with = "force")]
        resume: bool,
        #[arg(long)]
        force: bool,
    },
    /// Standardize every domain with the averaged style of a trained run.
    Standardize {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint file or run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Apply a classical standardization baseline domain-wise.
    Baseline {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        /// Z-score each image on its own statistics instead of its domain's.
        #[arg(long)]
        per_image: bool,
        #[arg(long)]
        force: bool,
    },
    /// Train the segmenter on the labelled source domains.
    TrainSeg {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated source domain ids.
        #[arg(long, value_delimiter = ',', required = true)]
        sources: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        force: bool,
    },
    /// Predict a target domain and score it per class.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Segmenter file written by train-seg.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: usize,
        /// Row label of the results table.
        #[arg(long, default_value = "U-net")]
        method: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Render every domain's sample in every domain's style as one mosaic.
    StyleMatrix {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
        /// Index of the sample image within each domain.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        force: bool,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("STDGAN_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "STDGAN_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::MakeSynthetic {
            out,
            seed,
            domains,
            images,
            size,
            force,
        } => commands::make_synthetic(&out, seed, domains, images, size, force),
        Command::TrainGan {
            manifest,
            out,
            cfg,
            resume,
            force,
        } => commands::train_gan(&manifest, &out, &cfg, resume, force),
        Command::Standardize {
            manifest,
            checkpoint,
            out,
            force,
        } => commands::standardize(&manifest, &checkpoint, &out, force),
        Command::Baseline {
            manifest,
            method,
            out,
            per_image,
            force,
        } => commands::baseline(&manifest, method.into(), &out, per_image, force),
        Command::TrainSeg {
            manifest,
            sources,
            out,
            cfg,
            force,
        } => commands::train_seg(&manifest, &sources, &out, &cfg, force),
        Command::Eval {
            manifest,
            model,
            target,
            method,
            out,
            force,
        } => commands::eval(&manifest, &model, target, &method, &out, force),
        Command::StyleMatrix {
            manifest,
            checkpoint,
            out,
            sample,
            force,
        } => commands::style_matrix(&manifest, &checkpoint, &out, sample, force),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

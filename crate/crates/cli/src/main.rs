mod commands;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use adaptive_ridge::Error;
use clap::{Parser, Subcommand, ValueEnum};

use commands::Analysis;

const THREADS_VAR: &str = "ADAPTIVE_RIDGE_THREADS";

#[derive(Parser)]
#[command(name = "adaptive-ridge", version, about = "Spatially adaptive ridge regularizers for image reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage adaptive Gaussian denoising.
    Denoise {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        output: PathBuf,
        /// Objective values per iteration as text columns.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Two-stage adaptive reconstruction from measurements.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        mask_out: Option<PathBuf>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Trains a denoiser on patches cut from the images in a directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        checkpoint_out: PathBuf,
    },
    /// Tunes the local-response mask provider of a checkpoint on a task.
    FinetuneMask {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Defaults to updating `--checkpoint` in place.
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
    },
    /// Stability diagnostics written as `key: value` reports.
    Analyze {
        #[arg(value_enum)]
        kind: AnalysisKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// PSNR and SSIM of `--a` against the reference `--b`.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        peak: f64,
    },
    /// Simulates noisy measurements of a ground-truth image.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalysisKind {
    Hoffman,
    Lipschitz,
    Rates,
    Coercivity,
}

impl From<AnalysisKind> for Analysis {
    fn from(k: AnalysisKind) -> Self {
        match k {
            AnalysisKind::Hoffman => Analysis::Hoffman,
            AnalysisKind::Lipschitz => Analysis::Lipschitz,
            AnalysisKind::Rates => Analysis::Rates,
            AnalysisKind::Coercivity => Analysis::Coercivity,
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 2,
        Error::Numerical(_) | Error::NonFinite(_) => 3,
        _ => 1,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::config("env", THREADS_VAR, format!("expected a thread count, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidInput(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    match cli.command {
        Command::Denoise { config, input, sigma, output, trace_out } => {
            commands::denoise(&config, &input, sigma, &output, trace_out.as_deref())
        }
        Command::Reconstruct { config, data, output, mask_out, trace_out } => {
            commands::reconstruct(&config, &data, &output, mask_out.as_deref(), trace_out.as_deref())
        }
        Command::Train { config, data_dir, checkpoint_out } => commands::train(&config, &data_dir, &checkpoint_out),
        Command::FinetuneMask { config, checkpoint, data_dir, checkpoint_out } => {
            commands::finetune_mask(&config, &checkpoint, &data_dir, checkpoint_out.as_deref())
        }
        Command::Analyze { kind, config, report } => commands::analyze(kind.into(), &config, &report),
        Command::Metrics { a, b, peak } => {
            println!("{}", commands::metrics(&a, &b, peak)?);
            Ok(())
        }
        Command::Simulate { config, truth, output, seed } => commands::simulate(&config, &truth, &output, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

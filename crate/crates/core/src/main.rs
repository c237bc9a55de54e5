use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use goldtrace::cli::{self, CampaignConfig, CliError};

/// Golden-model validation of GPU kernel executions.
#[derive(Debug, Parser)]
#[command(name = "goldtrace", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a golden model from simulated or recorded traces.
    BuildGolden {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of `.trace` files to build from instead of simulating.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate golden, normal and attacked datasets and report detection rates.
    Campaign {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Similarity of noisy traces to their golden references.
    NoiseStudy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hardware validator: overhead sweep and attacked runs.
    Hwsim {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a profiler CSV export into a trace file.
    Ingest {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Validate one trace file against a golden model.
    Validate {
        #[arg(long)]
        golden: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// Verdict file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load(config: Option<&Path>) -> Result<CampaignConfig, CliError> {
    match config {
        Some(p) => CampaignConfig::load(p),
        None => Ok(CampaignConfig::default()),
    }
}

fn run(command: Command) -> Result<Vec<PathBuf>, CliError> {
    match command {
        Command::BuildGolden { config, input, out } => {
            let cfg = load(config.as_deref())?;
            cli::cmd_build_golden(&cfg, &cfg.out_dir(out.as_deref()), input.as_deref())
        }
        Command::Campaign { config, out } => {
            let cfg = load(config.as_deref())?;
            cli::cmd_campaign(&cfg, &cfg.out_dir(out.as_deref()))
        }
        Command::NoiseStudy { config, out } => {
            let cfg = load(config.as_deref())?;
            cli::cmd_noise_study(&cfg, &cfg.out_dir(out.as_deref()))
        }
        Command::Hwsim { config, out } => {
            let cfg = load(config.as_deref())?;
            cli::cmd_hwsim(&cfg, &cfg.out_dir(out.as_deref()))
        }
        Command::Ingest { config, input, output } => {
            let cfg = load(config.as_deref())?;
            cli::cmd_ingest(&cfg, &input, &output)
        }
        Command::Validate { golden, trace, output } => {
            cli::cmd_validate(&golden, &trace, output.as_deref())?;
            Ok(output.into_iter().collect())
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args.command) {
        Ok(paths) => {
            for p in paths {
                eprintln!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("goldtrace: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

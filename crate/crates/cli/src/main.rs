mod config;
mod contrast;
mod error;
mod fit;
mod output;
mod simulate;
mod study;
mod validate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::contrast::{ContrastRequest, Estimand};
use crate::error::CliError;

/// Weighted GEE analysis and simulation for clustered SMARTs.
#[derive(Debug, Parser)]
#[command(name = "csmart", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the marginal mean model to a long-format data file.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Wald tests and intervals for contrasts of a saved fit.
    Contrast {
        /// `fit.json` written by `csmart fit`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long, value_enum, default_value = "end-of-study")]
        estimand: Estimand,
        /// Two embedded cAIs, e.g. "(1,1),(-1,-1)". Repeatable.
        #[arg(long = "pair")]
        pairs: Vec<String>,
        /// Every pair of embedded cAIs of the design.
        #[arg(long)]
        all_pairs: bool,
        /// Comma-separated coefficients for `--estimand custom`.
        #[arg(long = "c", value_delimiter = ',', allow_hyphen_values = true)]
        custom: Option<Vec<f64>>,
        #[arg(long)]
        level: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Draw one synthetic trial.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the spec's number of clusters.
        #[arg(long)]
        clusters: Option<usize>,
        /// Directory for cached conditional moments; defaults to $CSMART_MOMENT_CACHE.
        #[arg(long)]
        moment_cache: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Monte Carlo study of one or more analyses.
    McStudy {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads. Results do not depend on this.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        moment_cache: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Check a data file against a config without fitting.
    Validate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    match cli.command {
        Command::Fit { data, config, out } => fit::run(&data, &config, &out),
        Command::Contrast { fit, estimand, pairs, all_pairs, custom, level, out } => {
            let req = ContrastRequest { estimand, pairs, all_pairs, custom, level };
            contrast::run(&fit, &req, &out)
        }
        Command::Simulate { spec, seed, clusters, moment_cache, out } => {
            simulate::run(&spec, seed, clusters, moment_cache.as_deref(), &out)
        }
        Command::McStudy { spec, config, replicates, seed, workers, moment_cache, out } => {
            let overrides = study::Overrides { replicates, seed, workers };
            study::run(&spec, &config, overrides, moment_cache.as_deref(), &out)
        }
        Command::Validate { data, config } => validate::run(&data, &config).map(|_| Vec::new()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(written) => {
            for p in written {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

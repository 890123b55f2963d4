use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod error;
mod run;

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "msfpca", version, about = "Multivariate sparse functional PCA")]
struct Cli {
    /// Size of the global worker pool (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Marginal,
    Conditional,
    Both,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset from one of the built-in scenarios.
    Simulate {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        subjects: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the generating parameters to this CSV file.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Fit the model and write a run directory.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        chains: Option<usize>,
        /// Iterations per chain including warmup; half are warmup unless --warmup is given.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Fit every candidate of the [sweep] section and keep the best by elpd_loo.
        #[arg(long)]
        sweep: bool,
        /// Also export the raw draws as draws.csv.
        #[arg(long)]
        draws_csv: bool,
    },
    /// Posterior curve summaries of a run.
    Summarize {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 101)]
        grid: usize,
    },
    /// Normalized mutual information between blocks.
    Mi {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = KindArg::Both)]
        kind: KindArg,
    },
    /// PSIS-LOO with Pareto k diagnostics.
    Loo {
        #[arg(long)]
        run: PathBuf,
    },
    /// Posterior predictive replicates at the observed design.
    Ppc {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Simulation study: coverage of credible intervals over replicates.
    Coverage {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        subjects: usize,
        #[arg(long, default_value_t = 2)]
        chains: usize,
        #[arg(long, default_value_t = 500)]
        warmup: usize,
        #[arg(long, default_value_t = 500)]
        draws: usize,
        /// Normal prior sd on the covariance coordinates; flat when omitted.
        #[arg(long)]
        cov_prior_sd: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::InvalidArgument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(CliError::failed)?;
    }
    match cli.command {
        Command::Simulate { scenario, seed, subjects, out, truth } => {
            commands::simulate(&scenario, seed, subjects, &out, truth.as_deref())
        }
        Command::Fit { data, spec, chains, iters, warmup, seed, out, sweep, draws_csv } => commands::fit(commands::FitArgs {
            data,
            spec,
            chains,
            iters,
            warmup,
            seed,
            out,
            sweep,
            draws_csv,
        }),
        Command::Summarize { run, grid } => commands::summarize(&run, grid),
        Command::Mi { run, kind } => commands::mi(&run, kind),
        Command::Loo { run } => commands::loo(&run),
        Command::Ppc { run, reps, seed } => commands::ppc(&run, reps, seed),
        Command::Coverage { scenario, reps, seed, subjects, chains, warmup, draws, cov_prior_sd, out } => {
            commands::coverage(&scenario, reps, seed, subjects, (chains, warmup, draws), cov_prior_sd, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

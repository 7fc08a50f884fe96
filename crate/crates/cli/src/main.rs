//! `lie` — train, analyze, and sanity-check length-incentivized
//! exploration experiments on the synthetic deep-key task.
//!
//! Exit codes:
//! * `0` — success
//! * `1` — empty or invalid input (missing rollouts, malformed JSONL,
//!    refusing to overwrite without `--force`, schema mismatch, ...)
//! * `2` — configuration error (unknown/duplicate/bad config keys,
//!    invalid flag combinations; also clap's own usage errors)
//! * `3` — a premise of the length-decay bound is violated (some
//!    reachable context assigns zero stop probability)

mod commands;
mod config;
mod records;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Error type carrying the process exit code for each failure class.
#[derive(Debug)]
pub enum CmdError {
    /// Empty or invalid input data (exit 1).
    Input(String),
    /// Bad configuration or flag usage (exit 2).
    Config(String),
    /// A mathematical premise does not hold (exit 3).
    Premise(String),
}

impl CmdError {
    fn exit_code(&self) -> u8 {
        match self {
            CmdError::Input(_) => 1,
            CmdError::Config(_) => 2,
            CmdError::Premise(_) => 3,
        }
    }
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CmdError::Input(m) | CmdError::Config(m) | CmdError::Premise(m) => f.write_str(m),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "lie",
    version,
    about = "Length-incentivized exploration experiments on a synthetic deep-key task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Directory for output files (overrides `output_dir` from the config)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Base random seed (overrides `seed` from the config)
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Overwrite existing output files
    #[arg(long, global = true)]
    force: bool,

    /// Number of worker threads (default: all cores)
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy on the deep-key task and log per-iteration metrics
    Run {
        /// Path to a flat `key = value` config file
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
    },
    /// Recompute coverage and reward metrics for logged rollouts (JSONL)
    Analyze {
        /// Path to a rollouts `.jsonl` file
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Abstraction window: contexts are the last n tokens
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Redundancy threshold: penalize when a context repeats more than this
        #[arg(long, default_value_t = 10)]
        theta: usize,
        /// Length-penalty slope per missing token
        #[arg(long, default_value_t = 0.3 / 9000.0)]
        eta: f64,
        /// Offset added to each record's reference length to form the target
        #[arg(long, default_value_t = 0)]
        delta_l: usize,
        /// Weight on the redundancy penalty
        #[arg(long, default_value_t = 0.6)]
        beta: f64,
        /// Redundancy trigger: `any` context over threshold, or `all`
        #[arg(long, default_value = "any")]
        semantics: String,
    },
    /// Simulate UCB1 on a Bernoulli bandit and log regret curves
    Bandit {
        /// Comma-separated arm means, e.g. `0.9,0.1`
        #[arg(long, default_value = "0.9,0.1")]
        arms: String,
        /// Number of pulls per run
        #[arg(long, default_value_t = 100_000)]
        horizon: u64,
        /// Number of independent seeded runs
        #[arg(long, default_value_t = 50)]
        seeds: u64,
    },
    /// Check the exponential length-decay bound for a policy
    Lemma {
        /// Build the checked policy from this seed
        #[arg(long, value_name = "N", conflicts_with = "policy_file")]
        policy_seed: Option<u64>,
        /// Load the checked policy from a JSON file
        #[arg(long, value_name = "FILE")]
        policy_file: Option<PathBuf>,
        /// Largest body length whose probability is checked
        #[arg(long, default_value_t = 128)]
        l_max: usize,
        /// Vocabulary size for a seeded policy
        #[arg(long, default_value_t = 8)]
        vocab: usize,
        /// Context order for a seeded policy
        #[arg(long, default_value_t = 2)]
        order: usize,
        /// Logit noise scale for a seeded policy
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        /// Per-step stop probability a seeded policy starts from
        #[arg(long, default_value_t = 0.1)]
        eos_prob: f64,
    },
    /// Flatten one or more metrics.csv logs into tidy long-format CSV
    Plotdata {
        /// metrics.csv files produced by `run`
        #[arg(required = true, value_name = "FILE")]
        inputs: Vec<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CmdError> {
    match cli.command {
        Command::Run { config } => {
            commands::run::run(&config, cli.out.as_deref(), cli.seed, cli.force)
        }
        Command::Analyze { input, n, theta, eta, delta_l, beta, semantics } => {
            let flags = commands::analyze::AnalyzeFlags { n, theta, eta, delta_l, beta, semantics };
            commands::analyze::analyze(&input, cli.out.as_deref(), &flags, cli.force)
        }
        Command::Bandit { arms, horizon, seeds } => commands::bandit::bandit(
            &arms,
            horizon,
            seeds,
            cli.seed.unwrap_or(0),
            cli.out.as_deref(),
            cli.force,
        ),
        Command::Lemma { policy_seed, policy_file, l_max, vocab, order, sigma, eos_prob } => {
            let source = match (policy_seed, policy_file) {
                (_, Some(path)) => commands::lemma::PolicySource::File(path),
                (seed, None) => commands::lemma::PolicySource::Seeded {
                    seed: seed.unwrap_or(42),
                    vocab,
                    order,
                    sigma,
                    eos_prob,
                },
            };
            commands::lemma::lemma(source, l_max)
        }
        Command::Plotdata { inputs } => {
            commands::plotdata::plotdata(&inputs, cli.out.as_deref(), cli.force)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        // First (only) global-pool configuration in this process;
        // failure would mean the pool already exists, which is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

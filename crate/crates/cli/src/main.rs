use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use epq_cli::{commands, exit, CliError, CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "epq", version, about = "Offline RL penalty laboratory: CQL and EPQ on tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory; overrides `output.dir/output.run_id`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for scenario and sweep (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate an offline dataset from the configured behavior policy.
    GenData,
    /// Train on the stored dataset.
    Train,
    /// Measure the value bias of the stored agent.
    Bias,
    /// Check the underestimation certificate (exact modes).
    Certify,
    /// Run the action-distribution scenarios on the pendulum.
    Scenario,
    /// Train every hyperparameter grid cell on one dataset.
    Sweep,
}

fn run(cli: Cli) -> CliResult<i32> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir());
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::GenData => commands::gen_data(&cfg, &out),
        Command::Train => commands::train_cmd(&cfg, &out),
        Command::Bias => commands::bias(&cfg, &out),
        Command::Certify => commands::certify(&cfg, &out),
        Command::Scenario => commands::scenario(&cfg, &out),
        Command::Sweep => commands::sweep(&cfg, &out),
    }
}

fn main() -> ExitCode {
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    debug_assert!(code >= exit::SUCCESS);
    ExitCode::from(code as u8)
}

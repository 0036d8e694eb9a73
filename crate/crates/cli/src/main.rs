use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use itn_cli::{commands, CliError};

#[derive(Parser)]
#[command(name = "itn", version, about = "Introspective transformation networks on the desk")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an ITN classifier; extra `--key value` pairs override the config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory (default: $ITN_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Print the error rate of a checkpoint on a dataset spec.
    Eval {
        checkpoint: PathBuf,
        /// e.g. `mnist-test:frame=crop`, `perturbed:seed=7`, `toy:seed=1`, `file:PATH`.
        dataset: String,
        #[arg(long, default_value = "data/mnist")]
        data_root: PathBuf,
    },
    /// Synthesize pseudo-negatives from a training checkpoint into an image grid.
    Sample {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// `.pgm` writes binary PGM, anything else PNG.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every differentiable operation and loss.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Replace one case's backward rule with a wrong one.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Run a seeded comparison: limited_data, cross_dataset or threshold_sweep.
    Reproduce {
        protocol: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out, overrides } => commands::train(config.as_deref(), out, &overrides),
        Command::Eval { checkpoint, dataset, data_root } => commands::eval(&checkpoint, &dataset, &data_root).map(drop),
        Command::Sample { checkpoint, count, out, seed } => commands::sample(&checkpoint, count, &out, seed),
        Command::Gradcheck { seed, corrupt } => commands::gradcheck(seed, corrupt.as_deref()),
        Command::Reproduce { protocol, config, out, overrides } => {
            commands::reproduce(&protocol, config.as_deref(), out, &overrides).map(drop)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

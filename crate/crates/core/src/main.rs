use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qint::commands::{
    cmd_eval, cmd_explain, cmd_plot, cmd_train, resolve_config, run_dir_of_checkpoint, to_json_line, ConfigSource,
    StateSource, TrainSummary,
};
use qint::config::RunConfig;
use qint::{Error, Result};

const LOG_ENV: &str = "QINT_LOG_LEVEL";

#[derive(Parser)]
#[command(name = "qint", version, about = "Probability-of-success explanations for a Rainbow agent on mini-invaders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write log, config and checkpoints to a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Agent seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (default: run.out_dir).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Total environment steps. Also caps the prefill.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Greedy evaluation of a checkpoint; prints the report as JSON.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Evaluation seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluation steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Explain the greedy action at a state; prints one JSON record.
    Explain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// `initial`, or the number of logged training steps to replay.
        #[arg(long, default_value = "initial")]
        state: String,
        /// Run directory holding the log (default: inferred from the checkpoint path).
        #[arg(long = "run", value_name = "DIR")]
        run_dir: Option<PathBuf>,
    },
    /// Write reward.csv, ps.csv, q.csv and SVG charts from a run log.
    Plot {
        /// Run directory.
        #[arg(value_name = "RUN_DIR")]
        run_dir: PathBuf,
        /// Output directory (default: RUN_DIR/plots).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn init_logging() -> Result<()> {
    let level = std::env::var(LOG_ENV).unwrap_or_else(|_| "info".into());
    if !matches!(level.as_str(), "error" | "info" | "debug") {
        return Err(Error::Config(format!("{LOG_ENV} must be error, info or debug, got {level:?}")));
    }
    env_logger::Builder::new().parse_filters(&format!("qint={level}")).init();
    Ok(())
}

fn load(args: &ConfigArgs, run_dir: Option<&Path>) -> Result<RunConfig> {
    resolve_config(&ConfigSource {
        file: args.config.clone(),
        run_dir: run_dir.map(Path::to_path_buf),
        overrides: args.overrides.clone(),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out, steps } => {
            let mut cfg = load(&config, None)?;
            if let Some(seed) = seed {
                cfg.agent.seed = seed;
            }
            if let Some(steps) = steps {
                cfg.agent.total_steps = steps;
                cfg.agent.prefill_steps = cfg.agent.prefill_steps.min(steps);
            }
            cfg.validate()?;
            let outcome = cmd_train(&cfg, out.as_deref())?;
            println!("{}", to_json_line(&TrainSummary::new(&outcome))?);
        }
        Command::Eval { config, checkpoint, seed, steps } => {
            let run_dir = run_dir_of_checkpoint(&checkpoint);
            let mut cfg = load(&config, run_dir.as_deref())?;
            if let Some(seed) = seed {
                cfg.agent.eval_seed = seed;
            }
            if let Some(steps) = steps {
                cfg.agent.eval_steps = steps;
            }
            let report = cmd_eval(&cfg, &checkpoint)?;
            println!("{}", to_json_line(&report)?);
            println!("{}", to_json_line(&report.to_record())?);
        }
        Command::Explain { config, checkpoint, state, run_dir } => {
            let source: StateSource = state.parse()?;
            let run_dir = run_dir.or_else(|| run_dir_of_checkpoint(&checkpoint));
            let cfg = load(&config, run_dir.as_deref())?;
            let record = cmd_explain(&cfg, &checkpoint, source, run_dir.as_deref())?;
            println!("{}", to_json_line(&record)?);
        }
        Command::Plot { run_dir, out } => {
            let outputs = cmd_plot(&run_dir, out.as_deref())?;
            for p in [&outputs.reward_csv, &outputs.ps_csv, &outputs.q_csv, &outputs.reward_svg, &outputs.ps_svg] {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging() {
        eprintln!("error: {e}");
        return ExitCode::from(exit_code(&e));
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

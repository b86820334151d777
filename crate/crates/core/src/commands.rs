//! The four CLI verbs as library calls. `main.rs` only parses flags and maps
//! errors to exit codes.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::checkpoint_load;
use crate::config::RunConfig;
use crate::env::{MiniInvaders, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::explain::{explain, ExplanationRecord, RsMode};
use crate::net::NetworkGraph;
use crate::plot::{write_plots, PlotOutputs};
use crate::records::{read_log, LogRecord};
use crate::training::{
    evaluate_network, run_training, train_env_seed, EvalReport, GreedyPolicy, Policy, TrainingOutcome, CHECKPOINT_DIR,
    CONFIG_FILE, LOG_FILE,
};

/// Where a command's configuration comes from.
#[derive(Debug, Clone, Default)]
pub struct ConfigSource {
    /// Explicit `--config` file.
    pub file: Option<PathBuf>,
    /// Run directory whose `config.txt` is used when no file is given.
    pub run_dir: Option<PathBuf>,
    /// `key=value` overrides, applied last.
    pub overrides: Vec<String>,
}

/// `--config`, else `run_dir/config.txt` if present, else defaults; then the
/// overrides. Not validated; every command validates before running.
pub fn resolve_config(source: &ConfigSource) -> Result<RunConfig> {
    let mut config = match (&source.file, &source.run_dir) {
        (Some(f), _) => RunConfig::load(f)?,
        (None, Some(dir)) if dir.join(CONFIG_FILE).is_file() => RunConfig::load(&dir.join(CONFIG_FILE))?,
        _ => RunConfig::default(),
    };
    config.apply_overrides(&source.overrides)?;
    Ok(config)
}

/// Run directory of a checkpoint stored as `<run>/checkpoints/<name>.qint`.
pub fn run_dir_of_checkpoint(checkpoint: &Path) -> Option<PathBuf> {
    let parent = checkpoint.parent()?;
    if parent.file_name()? == CHECKPOINT_DIR {
        parent.parent().map(Path::to_path_buf)
    } else {
        None
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub env_steps: u64,
    pub learn_steps: u64,
    pub segments: usize,
    pub final_checkpoint: PathBuf,
    pub final_avg_reward: f64,
}

impl TrainSummary {
    pub fn new(outcome: &TrainingOutcome) -> Self {
        TrainSummary {
            run_dir: outcome.run_dir.clone(),
            env_steps: outcome.env_steps,
            learn_steps: outcome.learn_steps,
            segments: outcome.reports.len(),
            final_checkpoint: outcome.final_checkpoint.clone(),
            final_avg_reward: outcome.reports.last().map_or(0.0, |r| r.avg_reward),
        }
    }
}

/// Train into `out` or, when `None`, the configured `run.out_dir`.
pub fn cmd_train(config: &RunConfig, out: Option<&Path>) -> Result<TrainingOutcome> {
    let dir = out.map_or_else(|| config.run.out_dir.clone(), Path::to_path_buf);
    run_training(config, &dir)
}

fn load_network(config: &RunConfig, checkpoint: &Path) -> Result<(NetworkGraph, u64)> {
    config.validate()?;
    let ckpt = checkpoint_load(checkpoint)?;
    let net = ckpt.network()?;
    let expected = config.env.feature_dim() * config.agent.stack_depth;
    if net.input_dim() != expected {
        return Err(Error::Config(format!(
            "checkpoint expects {} inputs but the configuration gives {expected}; pass the run's config",
            net.input_dim()
        )));
    }
    if net.n_atoms != config.agent.support.n_atoms || net.n_actions != NUM_ACTIONS {
        return Err(Error::Config(format!(
            "checkpoint has {} actions × {} atoms but the configuration needs {NUM_ACTIONS} × {}",
            net.n_actions, net.n_atoms, config.agent.support.n_atoms
        )));
    }
    Ok((net, ckpt.global_step))
}

/// Greedy evaluation of a checkpoint with `agent.eval_steps` and
/// `agent.eval_seed` from `config`.
pub fn cmd_eval(config: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    let (net, global_step) = load_network(config, checkpoint)?;
    let r_s = config.introspection.static_rs(&config.env);
    let mut report = evaluate_network(config, &net, config.agent.eval_steps, config.agent.eval_seed, r_s)?;
    report.env_steps = global_step;
    Ok(report)
}

/// Which state to explain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateSource {
    /// Start of a fresh board.
    Initial,
    /// State after replaying the first `n` logged training actions.
    LogStep(u64),
}

impl std::str::FromStr for StateSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "initial" {
            return Ok(StateSource::Initial);
        }
        s.parse()
            .map(StateSource::LogStep)
            .map_err(|_| Error::Argument(format!("state must be `initial` or a step index, got {s:?}")))
    }
}

/// Explain the greedy action of `checkpoint` at the chosen state. Log
/// replay reads `run_dir/log.jsonl` and checks every logged reward.
pub fn cmd_explain(config: &RunConfig, checkpoint: &Path, source: StateSource, run_dir: Option<&Path>) -> Result<ExplanationRecord> {
    let (net, _) = load_network(config, checkpoint)?;
    let static_rs = config.introspection.static_rs(&config.env);
    let (env, step, observed_max) = match source {
        StateSource::Initial => {
            (MiniInvaders::new(config.env.clone(), config.agent.eval_seed, config.agent.stack_depth)?, 0, 0.0)
        }
        StateSource::LogStep(n) => {
            let dir = run_dir.ok_or_else(|| Error::Argument("log replay needs a run directory".into()))?;
            let records = read_log(&dir.join(LOG_FILE))?;
            let steps: Vec<(usize, f64)> = records
                .iter()
                .filter_map(|r| match r {
                    LogRecord::Step { action, reward, .. } => Some((*action, *reward)),
                    _ => None,
                })
                .collect();
            if n > steps.len() as u64 {
                return Err(Error::Argument(format!("step {n} is past the {} logged steps", steps.len())));
            }
            let mut env = MiniInvaders::new(config.env.clone(), train_env_seed(config), config.agent.stack_depth)?;
            let mut max_reward: f64 = 0.0;
            for (t, &(action, reward)) in steps.iter().take(n as usize).enumerate() {
                let outcome = env.step(action)?;
                if outcome.reward != reward {
                    return Err(Error::State(format!(
                        "replay diverged at step {t}: logged reward {reward}, replayed {}; wrong config?",
                        outcome.reward
                    )));
                }
                max_reward = max_reward.max(reward);
            }
            (env, n, max_reward)
        }
    };
    let support = config.agent.atom_support()?;
    let policy = GreedyPolicy { net: &net, support: &support, return_scale: config.agent.support.return_scale };
    let q = policy
        .q_values(&env.obs.flatten())?
        .ok_or_else(|| Error::Internal("greedy policy returned no Q-values".into()))?;
    let chosen = crate::head::argmax(&q);
    let mut rs = config.introspection.resolve(&config.env);
    if rs.mode == RsMode::Adaptive {
        rs.r_step_max = if observed_max > 0.0 { observed_max } else { static_rs };
    }
    explain(&q, &rs, chosen, step)
}

/// Tables and charts for a run into `out` (default `run_dir/plots`).
pub fn cmd_plot(run_dir: &Path, out: Option<&Path>) -> Result<PlotOutputs> {
    let records = read_log(&run_dir.join(LOG_FILE))?;
    let out = out.map_or_else(|| run_dir.join("plots"), Path::to_path_buf);
    write_plots(&records, &out)
}

/// One JSON object per line.
pub fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Internal(e.to_string()))
}

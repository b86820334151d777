//! Run configuration: a line-oriented `section.key = value` text file.
//!
//! `#` starts a comment. Unknown keys are rejected with the offending line
//! number. [`RunConfig::to_text`] writes every key, so parsing its output gives
//! back the same configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::env::{max_step_reward, EnvConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::explain::{IntrospectionConfig, RsMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrospectionSettings {
    /// `None` derives R^S from the environment.
    pub r_step_max: Option<f64>,
    pub mode: RsMode,
    pub include_bonus_in_rs: bool,
}

impl Default for IntrospectionSettings {
    fn default() -> Self {
        IntrospectionSettings { r_step_max: None, mode: RsMode::Static, include_bonus_in_rs: false }
    }
}

impl IntrospectionSettings {
    /// Concrete introspection config for `env`. Adaptive mode starts at zero.
    pub fn resolve(&self, env: &EnvConfig) -> IntrospectionConfig {
        let r = match self.mode {
            RsMode::Adaptive => 0.0,
            RsMode::Static => self.r_step_max.unwrap_or_else(|| max_step_reward(env, self.include_bonus_in_rs)),
        };
        IntrospectionConfig { r_step_max: r, mode: self.mode, include_bonus_in_rs: self.include_bonus_in_rs }
    }

    /// R^S to report with when no running maximum is available yet.
    pub fn static_rs(&self, env: &EnvConfig) -> f64 {
        self.r_step_max.unwrap_or_else(|| max_step_reward(env, self.include_bonus_in_rs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub out_dir: PathBuf,
    /// Write a train record every this many learn steps.
    pub train_log_every: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings { out_dir: PathBuf::from("runs/default"), train_log_every: 100 }
    }
}

/// Defaults are desk scale: the 4×4 swarm of [`EnvConfig::small`] with the
/// default agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub introspection: IntrospectionSettings,
    pub run: RunSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvConfig::small(),
            agent: AgentConfig::default(),
            introspection: IntrospectionSettings::default(),
            run: RunSettings::default(),
        }
    }
}

/// Text form of one configuration value.
pub trait ConfigValue: Sized {
    fn parse_value(raw: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! numeric_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(raw: &str) -> std::result::Result<Self, String> {
                raw.parse::<$t>().map_err(|e| format!("`{raw}` is not a valid {}: {e}", stringify!($t)))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

numeric_value!(u32, u64, usize, f64);

impl ConfigValue for bool {
    fn parse_value(raw: &str) -> std::result::Result<Self, String> {
        match raw {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("`{raw}` is not true or false")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for PathBuf {
    fn parse_value(raw: &str) -> std::result::Result<Self, String> {
        if raw.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(raw))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(raw: &str) -> std::result::Result<Self, String> {
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',').map(|p| usize::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for Option<f64> {
    fn parse_value(raw: &str) -> std::result::Result<Self, String> {
        if raw == "auto" {
            Ok(None)
        } else {
            f64::parse_value(raw).map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "auto".to_string(), |v| v.to_string())
    }
}

impl ConfigValue for RsMode {
    fn parse_value(raw: &str) -> std::result::Result<Self, String> {
        match raw {
            "static" => Ok(RsMode::Static),
            "adaptive" => Ok(RsMode::Adaptive),
            _ => Err(format!("`{raw}` is not static or adaptive")),
        }
    }
    fn render(&self) -> String {
        match self {
            RsMode::Static => "static".into(),
            RsMode::Adaptive => "adaptive".into(),
        }
    }
}

impl ConfigValue for Execution {
    fn parse_value(raw: &str) -> std::result::Result<Self, String> {
        match raw {
            "sequential" => Ok(Execution::Sequential),
            "parallel" => Ok(Execution::Parallel),
            _ => Err(format!("`{raw}` is not sequential or parallel")),
        }
    }
    fn render(&self) -> String {
        match self {
            Execution::Sequential => "sequential".into(),
            Execution::Parallel => "parallel".into(),
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+;)*) => {
        impl RunConfig {
            /// Every accepted key, in file order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(ConfigValue::render(&self.$($field).+)),)*
                    _ => None,
                }
            }

            pub fn set(&mut self, key: &str, raw: &str) -> std::result::Result<(), String> {
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(raw).map_err(|e| format!("{key}: {e}"))?;
                        Ok(())
                    })*
                    _ => Err(format!("unknown key `{key}`")),
                }
            }
        }
    };
}

config_keys! {
    "env.swarm_rows" => env.swarm_rows;
    "env.swarm_cols" => env.swarm_cols;
    "env.base_row_reward" => env.base_row_reward;
    "env.row_reward_step" => env.row_reward_step;
    "env.bonus_reward" => env.bonus_reward;
    "env.bonus_spawn_prob" => env.bonus_spawn_prob;
    "env.lives" => env.lives;
    "env.grid_width" => env.grid_width;
    "env.grid_height" => env.grid_height;
    "env.swarm_step_period" => env.swarm_step_period;
    "env.bomb_prob" => env.bomb_prob;
    "env.alien_spacing" => env.alien_spacing;
    "env.swarm_gap" => env.swarm_gap;
    "env.rng_seed" => env.rng_seed;
    "agent.gamma" => agent.gamma;
    "agent.n_step" => agent.n_step;
    "agent.batch_size" => agent.batch_size;
    "agent.target_sync_period" => agent.target_sync_period;
    "agent.train_every" => agent.train_every;
    "agent.prefill_steps" => agent.prefill_steps;
    "agent.total_steps" => agent.total_steps;
    "agent.eval_period" => agent.eval_period;
    "agent.eval_steps" => agent.eval_steps;
    "agent.seed" => agent.seed;
    "agent.eval_seed" => agent.eval_seed;
    "agent.eval_deterministic" => agent.eval_deterministic;
    "agent.stack_depth" => agent.stack_depth;
    "agent.grad_chunk" => agent.grad_chunk;
    "agent.execution" => agent.execution;
    "support.n_atoms" => agent.support.n_atoms;
    "support.v_min" => agent.support.v_min;
    "support.v_max" => agent.support.v_max;
    "support.return_scale" => agent.support.return_scale;
    "net.trunk" => agent.net.trunk;
    "net.head_hidden" => agent.net.head_hidden;
    "net.value_prior" => agent.net.value_prior;
    "optim.lr" => agent.optim.lr;
    "optim.beta1" => agent.optim.beta1;
    "optim.beta2" => agent.optim.beta2;
    "optim.eps" => agent.optim.eps;
    "replay.capacity" => agent.replay.capacity;
    "replay.alpha" => agent.replay.alpha;
    "replay.beta_start" => agent.replay.beta_start;
    "replay.epsilon_priority" => agent.replay.epsilon_priority;
    "replay.stratified" => agent.replay.stratified;
    "introspection.r_step_max" => introspection.r_step_max;
    "introspection.mode" => introspection.mode;
    "introspection.include_bonus_in_rs" => introspection.include_bonus_in_rs;
    "run.out_dir" => run.out_dir;
    "run.train_log_every" => run.train_log_every;
}

fn split_assignment(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

impl RunConfig {
    /// Apply `section.key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = split_assignment(line)
                .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`, got `{line}`", n + 1)))?;
            self.set(key, value).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("cannot read {}: {e}", path.display()))))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Apply `key=value` overrides (command line `--set`).
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) =
                split_assignment(o).ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(key, value).map_err(|e| Error::Config(format!("override `{o}`: {e}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        if let Some(r) = self.introspection.r_step_max {
            if !(r > 0.0) {
                return Err(Error::Config("introspection.r_step_max must be positive".into()));
            }
        }
        if self.run.train_log_every == 0 {
            return Err(Error::Config("run.train_log_every must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in Self::KEYS {
            let s = key.split('.').next().unwrap();
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap());
        }
        out
    }
}

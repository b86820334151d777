//! Training loop, evaluation harness and the policies they drive.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{self, Agent};
use crate::checkpoint::{checkpoint_save, Checkpoint};
use crate::config::RunConfig;
use crate::env::{EnvConfig, MiniInvaders, StepEvent, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::explain::{adaptive_update, probability_of_success, RsMode};
use crate::head::{argmax, AtomSupport};
use crate::net::NetworkGraph;
use crate::records::{LogRecord, LogWriter};

pub const LOG_FILE: &str = "log.jsonl";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.qint";

pub fn segment_checkpoint_name(segment: u64) -> String {
    format!("segment_{segment:04}.qint")
}

/// Seed of the training environment stream.
pub fn train_env_seed(config: &RunConfig) -> u64 {
    config.env.rng_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(config.agent.seed)
}

pub trait Policy {
    fn act(&mut self, obs: &[f64]) -> Result<usize>;
    /// Per-action Q in environment reward units, if the policy has any.
    fn q_values(&self, obs: &[f64]) -> Result<Option<Vec<f64>>>;
}

/// Noise-off argmax of a network.
pub struct GreedyPolicy<'a> {
    pub net: &'a NetworkGraph,
    pub support: &'a AtomSupport,
    pub return_scale: f64,
}

impl Policy for GreedyPolicy<'_> {
    fn act(&mut self, obs: &[f64]) -> Result<usize> {
        Ok(argmax(&agent::q_values(self.net, self.support, obs, true)?))
    }

    fn q_values(&self, obs: &[f64]) -> Result<Option<Vec<f64>>> {
        let q = agent::q_values(self.net, self.support, obs, true)?;
        Ok(Some(q.into_iter().map(|v| v * self.return_scale).collect()))
    }
}

/// Argmax under freshly drawn noise every step.
pub struct NoisyPolicy {
    pub net: NetworkGraph,
    pub support: AtomSupport,
    pub return_scale: f64,
    pub rng: ChaCha8Rng,
}

impl Policy for NoisyPolicy {
    fn act(&mut self, obs: &[f64]) -> Result<usize> {
        agent::act(&mut self.net, &self.support, obs, &mut self.rng, false)
    }

    fn q_values(&self, obs: &[f64]) -> Result<Option<Vec<f64>>> {
        let q = agent::q_values(&self.net, &self.support, obs, true)?;
        Ok(Some(q.into_iter().map(|v| v * self.return_scale).collect()))
    }
}

pub struct UniformRandomPolicy {
    pub rng: ChaCha8Rng,
}

impl UniformRandomPolicy {
    pub fn new(seed: u64) -> Self {
        UniformRandomPolicy { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Policy for UniformRandomPolicy {
    fn act(&mut self, _obs: &[f64]) -> Result<usize> {
        Ok(self.rng.gen_range(0..NUM_ACTIONS))
    }

    fn q_values(&self, _obs: &[f64]) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    /// Evaluation step at which the probe was taken (0 = initial state).
    pub eval_step: u64,
    pub q: Vec<f64>,
    pub ps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub segment: u64,
    /// Training steps taken before this evaluation.
    pub env_steps: u64,
    pub eval_steps: u64,
    pub total_reward: f64,
    /// Mean reward per evaluation step.
    pub avg_reward: f64,
    pub swarm_clears: u64,
    pub board_resets: u64,
    pub r_s: f64,
    /// Initial state first, then one per board reset. Empty for policies
    /// without Q-values.
    pub probes: Vec<Probe>,
}

impl EvalReport {
    /// Q at the initial probe state, or empty.
    pub fn probe_q(&self) -> &[f64] {
        self.probes.first().map_or(&[], |p| p.q.as_slice())
    }

    pub fn probe_ps(&self) -> &[f64] {
        self.probes.first().map_or(&[], |p| p.ps.as_slice())
    }

    pub fn to_record(&self) -> LogRecord {
        LogRecord::Eval {
            segment: self.segment,
            avg_reward: self.avg_reward,
            swarm_clears: self.swarm_clears,
            q: self.probe_q().to_vec(),
            ps: self.probe_ps().to_vec(),
        }
    }
}

fn probe(policy: &dyn Policy, obs: &[f64], r_s: f64, eval_step: u64) -> Result<Option<Probe>> {
    let Some(q) = policy.q_values(obs)? else { return Ok(None) };
    let ps = q.iter().map(|&v| probability_of_success(v, r_s)).collect::<Result<Vec<_>>>()?;
    Ok(Some(Probe { eval_step, q, ps }))
}

/// Run `policy` for `eval_steps` on a fresh environment seeded with `seed`.
pub fn run_evaluation(
    policy: &mut dyn Policy,
    env_config: &EnvConfig,
    stack_depth: usize,
    eval_steps: u64,
    seed: u64,
    r_s: f64,
) -> Result<EvalReport> {
    let mut env = MiniInvaders::new(env_config.clone(), seed, stack_depth)?;
    let mut probes = Vec::new();
    probes.extend(probe(policy, &env.obs.flatten(), r_s, 0)?);
    let (mut total_reward, mut swarm_clears, mut board_resets) = (0.0, 0, 0);
    for t in 0..eval_steps {
        let obs = env.obs.flatten();
        let a = policy.act(&obs)?;
        let outcome = env.step(a)?;
        total_reward += outcome.reward;
        swarm_clears += outcome.events.iter().filter(|e| matches!(e, StepEvent::SwarmCleared)).count() as u64;
        if outcome.reset_occurred {
            board_resets += 1;
            probes.extend(probe(policy, &env.obs.flatten(), r_s, t + 1)?);
        }
    }
    Ok(EvalReport {
        segment: 0,
        env_steps: 0,
        eval_steps,
        total_reward,
        avg_reward: if eval_steps == 0 { 0.0 } else { total_reward / eval_steps as f64 },
        swarm_clears,
        board_resets,
        r_s,
        probes,
    })
}

/// Evaluate a parameter set the way the training loop does.
pub fn evaluate_network(config: &RunConfig, net: &NetworkGraph, eval_steps: u64, seed: u64, r_s: f64) -> Result<EvalReport> {
    let support = config.agent.atom_support()?;
    let scale = config.agent.support.return_scale;
    let depth = config.agent.stack_depth;
    if config.agent.eval_deterministic {
        let mut p = GreedyPolicy { net, support: &support, return_scale: scale };
        run_evaluation(&mut p, &config.env, depth, eval_steps, seed, r_s)
    } else {
        let mut p = NoisyPolicy {
            net: net.clone(),
            support,
            return_scale: scale,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5EED),
        };
        run_evaluation(&mut p, &config.env, depth, eval_steps, seed, r_s)
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub run_dir: PathBuf,
    pub reports: Vec<EvalReport>,
    pub env_steps: u64,
    pub learn_steps: u64,
    pub replay_len: usize,
    pub final_checkpoint: PathBuf,
    pub final_network: NetworkGraph,
}

fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Train into `run_dir`: config echo, JSON-lines log, one checkpoint per
/// evaluation and a final checkpoint.
pub fn run_training(config: &RunConfig, run_dir: &Path) -> Result<TrainingOutcome> {
    config.validate()?;
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| io_context(&ckpt_dir, e))?;
    let cfg_path = run_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, config.to_text()).map_err(|e| io_context(&cfg_path, e))?;
    let mut log = LogWriter::create(&run_dir.join(LOG_FILE))?;
    let ac = &config.agent;
    log.write(&LogRecord::Meta {
        config: config.to_text(),
        seed: ac.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
    })?;

    let mut env = MiniInvaders::new(config.env.clone(), train_env_seed(config), ac.stack_depth)?;
    let input_dim = env.obs.flatten().len();
    let mut agent = Agent::new(ac.clone(), input_dim, NUM_ACTIONS)?;
    let mut rs = config.introspection.resolve(&config.env);
    let mut reports = Vec::new();

    let result = (|| -> Result<()> {
        for t in 0..ac.total_steps {
            let obs = env.obs.flatten();
            let action = agent.act(&obs)?;
            let outcome = env.step(action)?;
            let next_obs = env.obs.flatten();
            agent.observe(obs, action, outcome.reward, &next_obs, outcome.reset_occurred);
            if rs.mode == RsMode::Adaptive {
                rs = adaptive_update(&rs, outcome.reward)?;
            }
            log.write(&LogRecord::Step { step: t, action, reward: outcome.reward, reset: outcome.reset_occurred })?;

            let done = t + 1;
            if done > ac.prefill_steps
                && (done - ac.prefill_steps) % ac.train_every == 0
                && agent.replay.len() >= ac.batch_size
            {
                agent.replay.set_beta(ac.beta_at(done));
                let stats = agent.train_step()?;
                if stats.learn_step % config.run.train_log_every == 0 {
                    log.write(&LogRecord::Train {
                        learn_step: stats.learn_step,
                        loss: stats.loss,
                        mean_abs_td: stats.mean_abs_td,
                    })?;
                }
            }

            if done % ac.eval_period == 0 || done == ac.total_steps {
                if done == ac.total_steps {
                    let tail = agent.nstep.finish(&next_obs);
                    for tr in tail {
                        agent.replay.add(tr);
                    }
                }
                let segment = reports.len() as u64 + 1;
                let r_s = if rs.r_step_max > 0.0 { rs.r_step_max } else { config.introspection.static_rs(&config.env) };
                let mut report = evaluate_network(config, &agent.online, ac.eval_steps, ac.eval_seed, r_s)?;
                report.segment = segment;
                report.env_steps = done;
                log.write(&report.to_record())?;
                log::info!(
                    "segment {segment} step {done}: avg reward {:.4}, clears {}, learn steps {}",
                    report.avg_reward,
                    report.swarm_clears,
                    agent.learn_steps
                );
                let ckpt = Checkpoint::from_network(&agent.online, done, &agent.rng);
                checkpoint_save(&ckpt, &ckpt_dir.join(segment_checkpoint_name(segment)))?;
                if done == ac.total_steps {
                    checkpoint_save(&ckpt, &ckpt_dir.join(FINAL_CHECKPOINT))?;
                }
                reports.push(report);
                log.flush()?;
            }
        }
        Ok(())
    })();
    // Keep whatever was logged even when the run fails.
    let flushed = log.flush();
    result?;
    flushed?;

    Ok(TrainingOutcome {
        run_dir: run_dir.to_path_buf(),
        reports,
        env_steps: agent.env_steps,
        learn_steps: agent.learn_steps,
        replay_len: agent.replay.len(),
        final_checkpoint: ckpt_dir.join(FINAL_CHECKPOINT),
        final_network: agent.online,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::total_swarm_reward;
    use crate::records::read_log;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.agent.total_steps = 300;
        c.agent.prefill_steps = 100;
        c.agent.eval_period = 150;
        c.agent.eval_steps = 50;
        c.agent.batch_size = 8;
        c.agent.net.trunk = vec![8];
        c.agent.net.head_hidden = 8;
        c.agent.support.n_atoms = 11;
        c
    }

    #[test]
    fn prefill_only_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.agent.prefill_steps = c.agent.total_steps;
        let out = run_training(&c, dir.path()).unwrap();
        assert_eq!(out.learn_steps, 0);
        assert_eq!(out.replay_len as u64, c.agent.prefill_steps);
        assert_eq!(out.env_steps, c.agent.total_steps);
    }

    #[test]
    fn single_eval_when_period_equals_total() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.agent.eval_period = c.agent.total_steps;
        let out = run_training(&c, dir.path()).unwrap();
        assert_eq!(out.reports.len(), 1);
        assert!(out.final_checkpoint.exists());
    }

    #[test]
    fn final_eval_added_off_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.agent.eval_period = 200;
        let out = run_training(&c, dir.path()).unwrap();
        let steps: Vec<u64> = out.reports.iter().map(|r| r.env_steps).collect();
        assert_eq!(steps, vec![200, 300]);
    }

    #[test]
    fn step_logs_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_training(&tiny(), a.path()).unwrap();
        run_training(&tiny(), b.path()).unwrap();
        let la = fs::read(a.path().join(LOG_FILE)).unwrap();
        let lb = fs::read(b.path().join(LOG_FILE)).unwrap();
        assert_eq!(la, lb);
        let records = read_log(&a.path().join(LOG_FILE)).unwrap();
        let steps = records.iter().filter(|r| matches!(r, LogRecord::Step { .. })).count();
        assert_eq!(steps, 300);
    }

    #[test]
    fn zero_network_evaluation_is_finite() {
        let c = RunConfig::default();
        let input = c.env.feature_dim() * c.agent.stack_depth;
        let net = NetworkGraph::zeros(&c.agent.net_shape(input, NUM_ACTIONS)).unwrap();
        let r = evaluate_network(&c, &net, 500, 3, 20.0).unwrap();
        assert!(r.avg_reward.is_finite());
        assert_eq!(r.probe_q().len(), 6);
        assert!(r.probe_ps().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    /// Fires only when a simulated shot connects, otherwise walks toward
    /// the nearest live alien.
    struct Sniper {
        env: MiniInvaders,
    }

    impl Sniper {
        fn shot_hits(&self) -> bool {
            let cfg = &self.env.config;
            let (mut s, first) = crate::env::env_step(cfg, &self.env.state, 1).unwrap();
            if first.reward > 0.0 {
                return true;
            }
            while s.player_bullet.is_some() {
                let (next, o) = crate::env::env_step(cfg, &s, 0).unwrap();
                if o.reward > 0.0 {
                    return true;
                }
                s = next;
            }
            false
        }
    }

    impl Policy for Sniper {
        fn act(&mut self, _obs: &[f64]) -> Result<usize> {
            let s = &self.env.state;
            let cfg = &self.env.config;
            let a = if s.player_bullet.is_none() && self.shot_hits() {
                1
            } else {
                let target = (0..cfg.swarm_cols)
                    .filter(|&c| s.alive.iter().any(|row| row[c]))
                    .map(|c| s.swarm_offset.col + c * cfg.alien_spacing)
                    .min_by_key(|&x| x.abs_diff(s.player_col));
                match target {
                    Some(x) if x > s.player_col => 2,
                    Some(x) if x < s.player_col => 3,
                    _ => 0,
                }
            };
            self.env.step(a)?;
            Ok(a)
        }

        fn q_values(&self, _obs: &[f64]) -> Result<Option<Vec<f64>>> {
            Ok(None)
        }
    }

    #[test]
    fn scripted_clear_earns_whole_swarm() {
        let mut cfg = EnvConfig::small();
        cfg.bomb_prob = 0.0;
        cfg.bonus_spawn_prob = 0.0;
        let seed = 11;
        let mut sniper = Sniper { env: MiniInvaders::new(cfg.clone(), seed, 4).unwrap() };
        let r = run_evaluation(&mut sniper, &cfg, 4, 2000, seed, 20.0).unwrap();
        assert!(r.swarm_clears >= 1, "{r:?}");
        assert!(r.total_reward >= total_swarm_reward(&cfg));
    }

    #[test]
    fn random_policy_has_no_probes() {
        let cfg = EnvConfig::small();
        let r = run_evaluation(&mut UniformRandomPolicy::new(1), &cfg, 4, 300, 5, 20.0).unwrap();
        assert!(r.probes.is_empty());
        assert!(r.avg_reward.is_finite());
    }
}

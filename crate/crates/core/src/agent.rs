//! Rainbow-style learner: noisy-net acting, double-Q categorical targets,
//! prioritized n-step replay and a periodically synchronised target network.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::head::{
    argmax, dueling_backward, dueling_combine, expected_q, kl_loss, log_softmax, project_target, AtomSupport,
    CategoricalValueDistribution, DuelingLogits,
};
use crate::net::{adam_step, backward, forward_batch, infer_batch, AdamConfig, AdamState, NetShape, NetworkGraph, ParamGradients};
use crate::replay::{NStepAccumulator, PrioritizedReplay, ReplayConfig, Transition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportConfig {
    pub n_atoms: usize,
    pub v_min: f64,
    pub v_max: f64,
    /// Rewards (and R^S) are divided by this before they meet the support.
    pub return_scale: f64,
}

impl Default for SupportConfig {
    fn default() -> Self {
        SupportConfig { n_atoms: 51, v_min: -10.0, v_max: 10.0, return_scale: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub trunk: Vec<usize>,
    pub head_hidden: usize,
    /// Initial value distribution peaks at the atom nearest zero return and
    /// falls off by this many nats per atom. 0 starts uniform.
    pub value_prior: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { trunk: vec![128], head_hidden: 128, value_prior: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub gamma: f64,
    pub n_step: usize,
    pub batch_size: usize,
    /// In learn steps.
    pub target_sync_period: u64,
    /// Environment steps between learn steps.
    pub train_every: u64,
    pub prefill_steps: u64,
    pub total_steps: u64,
    pub eval_period: u64,
    pub eval_steps: u64,
    pub seed: u64,
    pub eval_seed: u64,
    /// Evaluate with noise switched off.
    pub eval_deterministic: bool,
    pub stack_depth: usize,
    /// Batch rows per gradient work item.
    pub grad_chunk: usize,
    pub execution: Execution,
    pub support: SupportConfig,
    pub net: NetConfig,
    pub optim: AdamConfig,
    pub replay: ReplayConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.99,
            n_step: 3,
            batch_size: 32,
            target_sync_period: 2_000,
            train_every: 4,
            prefill_steps: 8_000,
            total_steps: 300_000,
            eval_period: 10_000,
            eval_steps: 2_000,
            seed: 0,
            eval_seed: 1_000_003,
            eval_deterministic: true,
            stack_depth: crate::env::STACK_DEPTH,
            grad_chunk: 16,
            execution: Execution::Parallel,
            support: SupportConfig::default(),
            net: NetConfig::default(),
            optim: AdamConfig::default(),
            replay: ReplayConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_step == 0 || self.batch_size == 0 || self.target_sync_period == 0 || self.train_every == 0 {
            return bad("agent counts must be positive");
        }
        if self.total_steps == 0 || self.eval_period == 0 || self.eval_steps == 0 || self.stack_depth == 0 || self.grad_chunk == 0 {
            return bad("agent counts must be positive");
        }
        if self.prefill_steps > self.total_steps {
            return bad("prefill_steps must not exceed total_steps");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.net.value_prior >= 0.0) || !self.net.value_prior.is_finite() {
            return bad("net.value_prior must be finite and non-negative");
        }
        if !(self.support.return_scale > 0.0) {
            return bad("return_scale must be positive");
        }
        if self.optim.lr < 0.0 || !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return bad("invalid optimizer constants");
        }
        AtomSupport::new(self.support.n_atoms, self.support.v_min, self.support.v_max)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn atom_support(&self) -> Result<AtomSupport> {
        AtomSupport::new(self.support.n_atoms, self.support.v_min, self.support.v_max)
    }

    pub fn net_shape(&self, input_dim: usize, n_actions: usize) -> NetShape {
        NetShape {
            input_dim,
            trunk: self.net.trunk.clone(),
            head_hidden: self.net.head_hidden,
            n_actions,
            n_atoms: self.support.n_atoms,
        }
    }

    /// Importance-sampling exponent after `env_steps`, annealed linearly to 1
    /// over the learning phase.
    pub fn beta_at(&self, env_steps: u64) -> f64 {
        let span = self.total_steps.saturating_sub(self.prefill_steps).max(1) as f64;
        let progress = (env_steps.saturating_sub(self.prefill_steps) as f64 / span).min(1.0);
        self.replay.beta_start + (1.0 - self.replay.beta_start) * progress
    }
}

/// Anything that maps a batch of observations to per-action categorical
/// distributions.
pub trait DistributionalModel {
    fn distributions(&self, obs: &[&[f64]]) -> Result<Vec<CategoricalValueDistribution>>;
}

/// A network evaluated with its current noise sample, or with noise off.
#[derive(Debug, Clone, Copy)]
pub struct NetModel<'a> {
    pub net: &'a NetworkGraph,
    pub deterministic: bool,
}

fn stack_rows(rows: &[&[f64]]) -> Result<Array2<f64>> {
    let width = rows.first().map_or(0, |r| r.len());
    let mut x = Array2::zeros((rows.len(), width));
    for (mut dst, src) in x.rows_mut().into_iter().zip(rows) {
        if src.len() != width {
            return Err(Error::Argument("observations differ in length".into()));
        }
        dst.assign(&ArrayView2::from_shape((1, width), src).unwrap().row(0));
    }
    Ok(x)
}

/// Per-row dueling logits of a batched head output.
fn row_logits(net: &NetworkGraph, value: &Array2<f64>, adv: &Array2<f64>, row: usize) -> Result<DuelingLogits> {
    let a = adv
        .row(row)
        .to_owned()
        .into_shape_with_order((net.n_actions, net.n_atoms))
        .map_err(|e| Error::Internal(e.to_string()))?;
    DuelingLogits::new(value.row(row).to_owned(), a)
}

impl DistributionalModel for NetModel<'_> {
    fn distributions(&self, obs: &[&[f64]]) -> Result<Vec<CategoricalValueDistribution>> {
        if obs.is_empty() {
            return Ok(Vec::new());
        }
        let x = stack_rows(obs)?;
        let out = infer_batch(self.net, x.view(), self.deterministic)?;
        (0..obs.len())
            .map(|r| dueling_combine(&row_logits(self.net, &out.value_logits, &out.advantage_logits, r)?))
            .collect()
    }
}

/// Expected Q per action, in support units.
pub fn q_values(net: &NetworkGraph, support: &AtomSupport, obs: &[f64], deterministic: bool) -> Result<Vec<f64>> {
    let d = NetModel { net, deterministic }.distributions(&[obs])?;
    Ok(expected_q(&d[0], support))
}

/// Pick an action. Non-greedy acting draws fresh noise first; greedy acting
/// uses the mean parameters. Ties go to the lowest index.
pub fn act(net: &mut NetworkGraph, support: &AtomSupport, obs: &[f64], rng: &mut ChaCha8Rng, greedy: bool) -> Result<usize> {
    if !greedy {
        net.resample_noise(rng);
    }
    Ok(argmax(&q_values(net, support, obs, greedy)?))
}

/// Double-Q categorical targets: the online model picks `a*` at `next_obs`,
/// the target model supplies the distribution of `a*` that gets projected.
pub fn compute_targets(
    batch: &[Transition],
    online: &dyn DistributionalModel,
    target: &dyn DistributionalModel,
    support: &AtomSupport,
) -> Result<Array2<f64>> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let next: Vec<&[f64]> = batch.iter().map(|t| t.next_obs.as_slice()).collect();
    let selectors = online.distributions(&next)?;
    let evaluators = target.distributions(&next)?;
    let mut out = Array2::zeros((batch.len(), support.n_atoms()));
    for (k, t) in batch.iter().enumerate() {
        let best = argmax(&expected_q(&selectors[k], support));
        let row = evaluators[k].row(best).to_vec();
        let projected = project_target(&row, support, t.n_step_reward, t.discount, t.truncated);
        out.row_mut(k).assign(&ndarray::Array1::from(projected));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub learn_step: u64,
    /// Mean importance-weighted cross-entropy.
    pub loss: f64,
    /// Mean unweighted cross-entropy, the priority signal.
    pub mean_abs_td: f64,
}

/// Loss, per-sample cross-entropies and parameter gradients for one slice of
/// a batch. `scale` multiplies every sample's gradient.
pub fn batch_gradients(
    online: &NetworkGraph,
    target: &NetworkGraph,
    support: &AtomSupport,
    batch: &[Transition],
    weights: &[f64],
    scale: f64,
) -> Result<(Vec<f64>, ParamGradients)> {
    let targets = compute_targets(
        batch,
        &NetModel { net: online, deterministic: false },
        &NetModel { net: target, deterministic: false },
        support,
    )?;
    let obs: Vec<&[f64]> = batch.iter().map(|t| t.obs.as_slice()).collect();
    let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
    let w: Vec<f64> = weights.iter().map(|w| w * scale).collect();
    loss_gradients(online, &obs, &actions, targets.view(), &w, false)
}

/// Per-sample cross-entropy of `online` against fixed `targets` and the
/// gradient of `Σ_k weights[k] · loss_k`.
pub fn loss_gradients(
    online: &NetworkGraph,
    obs: &[&[f64]],
    actions: &[usize],
    targets: ArrayView2<f64>,
    weights: &[f64],
    deterministic: bool,
) -> Result<(Vec<f64>, ParamGradients)> {
    let x = stack_rows(obs)?;
    let (out, tape) = forward_batch(online, x.view(), deterministic)?;
    let (n_actions, n_atoms) = (online.n_actions, online.n_atoms);
    let mut d_value = Array2::zeros((obs.len(), n_atoms));
    let mut d_adv = Array2::zeros((obs.len(), n_actions * n_atoms));
    let mut losses = Vec::with_capacity(obs.len());
    for (k, &action) in actions.iter().enumerate() {
        if action >= n_actions {
            return Err(Error::Argument(format!("action {action} outside 0..{n_actions}")));
        }
        let logits = row_logits(online, &out.value_logits, &out.advantage_logits, k)?;
        let combined = logits.combined();
        let log_p = log_softmax(combined.row(action));
        let target_row = targets.row(k).to_vec();
        let (loss, seed) = kl_loss(&target_row, log_p.as_slice().unwrap());
        losses.push(loss);
        let seed: Vec<f64> = seed.iter().map(|g| g * weights[k]).collect();
        let (dv, da) = dueling_backward(&seed, action, n_actions);
        d_value.row_mut(k).assign(&ndarray::Array1::from(dv));
        d_adv.row_mut(k).assign(&ndarray::Array1::from(da));
    }
    let grads = backward(online, &tape, d_value.view(), d_adv.view())?;
    Ok((losses, grads))
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub support: AtomSupport,
    pub online: NetworkGraph,
    pub target: NetworkGraph,
    pub optimizer: AdamState,
    pub replay: PrioritizedReplay,
    pub nstep: NStepAccumulator,
    pub env_steps: u64,
    pub learn_steps: u64,
    pub rng: ChaCha8Rng,
}

impl Agent {
    pub fn new(config: AgentConfig, input_dim: usize, n_actions: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let support = config.atom_support()?;
        let mut online = NetworkGraph::build(&config.net_shape(input_dim, n_actions), &mut rng)?;
        if config.net.value_prior > 0.0 {
            let zero = support
                .atoms()
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map_or(0, |(i, _)| i);
            online.concentrate_value(zero, config.net.value_prior);
        }
        let target = online.clone();
        Ok(Agent {
            support,
            optimizer: AdamState::new(config.optim, &online),
            replay: PrioritizedReplay::new(config.replay)?,
            nstep: NStepAccumulator::new(config.n_step, config.gamma),
            online,
            target,
            env_steps: 0,
            learn_steps: 0,
            rng,
            config,
        })
    }

    /// Noisy action for training.
    pub fn act(&mut self, obs: &[f64]) -> Result<usize> {
        act(&mut self.online, &self.support, obs, &mut self.rng, false)
    }

    /// Feed one environment step; completed n-step transitions go to replay.
    /// `reward` is in environment units.
    pub fn observe(&mut self, obs: Vec<f64>, action: usize, reward: f64, next_obs: &[f64], reset: bool) -> usize {
        let scaled = reward / self.config.support.return_scale;
        let ts = self.nstep.push(obs, action, scaled, next_obs, reset);
        let n = ts.len();
        for t in ts {
            self.replay.add(t);
        }
        self.env_steps += 1;
        n
    }

    /// One prioritized learning update.
    pub fn train_step(&mut self) -> Result<TrainStats> {
        let bs = self.config.batch_size;
        if self.replay.len() < bs {
            return Err(Error::State(format!("replay holds {} transitions, batch needs {bs}", self.replay.len())));
        }
        let sample = self.replay.sample(bs, &mut self.rng)?;
        self.online.resample_noise(&mut self.rng);
        self.target.resample_noise(&mut self.rng);

        let chunk = self.config.grad_chunk.min(bs);
        let starts: Vec<usize> = (0..bs).step_by(chunk).collect();
        let scale = 1.0 / bs as f64;
        let (online, target, support) = (&self.online, &self.target, &self.support);
        let parts = exec::map(self.config.execution, &starts, |&s| {
            let e = (s + chunk).min(bs);
            batch_gradients(online, target, support, &sample.transitions[s..e], &sample.weights[s..e], scale)
        });
        let mut grads = ParamGradients::zeros_like(&self.online);
        let mut losses = Vec::with_capacity(bs);
        for part in parts {
            let (l, g) = part?;
            losses.extend(l);
            grads.add_assign(&g);
        }
        adam_step(&mut self.optimizer, &mut self.online, &grads)?;
        self.replay.update(&sample.indices, &losses)?;
        self.learn_steps += 1;
        if self.learn_steps % self.config.target_sync_period == 0 {
            self.sync_target();
        }
        let loss = losses.iter().zip(&sample.weights).map(|(l, w)| l * w).sum::<f64>() / bs as f64;
        let mean_abs_td = losses.iter().map(|l| l.abs()).sum::<f64>() / bs as f64;
        Ok(TrainStats { learn_step: self.learn_steps, loss, mean_abs_td })
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
    }
}

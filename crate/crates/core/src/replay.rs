//! Multi-step transitions and proportional prioritized replay.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One n-step experience unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    /// `Σ_{k<n} γ^k r_{t+k}`
    pub n_step_reward: f64,
    pub next_obs: Vec<f64>,
    /// `γⁿ`, or 0 when truncated.
    pub discount: f64,
    /// A reset happened inside the n-step window.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
struct Pending {
    obs: Vec<f64>,
    action: usize,
    rewards: Vec<f64>,
}

/// Folds one-step experience into n-step transitions.
#[derive(Debug, Clone)]
pub struct NStepAccumulator {
    n: usize,
    gamma: f64,
    pending: VecDeque<Pending>,
}

impl NStepAccumulator {
    pub fn new(n: usize, gamma: f64) -> Self {
        assert!(n >= 1, "n-step horizon must be positive");
        NStepAccumulator { n, gamma, pending: VecDeque::with_capacity(n) }
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    fn discounted(&self, rewards: &[f64]) -> f64 {
        let mut g = 0.0;
        let mut scale = 1.0;
        for r in rewards {
            g += scale * r;
            scale *= self.gamma;
        }
        g
    }

    /// Record `(obs, action)` followed by `reward` and `next_obs`.
    ///
    /// Emits the oldest pending transition once it has `n` rewards. When
    /// `reset` is set every pending entry is flushed as a truncated transition
    /// (discount 0), oldest first.
    pub fn push(&mut self, obs: Vec<f64>, action: usize, reward: f64, next_obs: &[f64], reset: bool) -> Vec<Transition> {
        for p in self.pending.iter_mut() {
            p.rewards.push(reward);
        }
        self.pending.push_back(Pending { obs, action, rewards: vec![reward] });

        let mut out = Vec::new();
        if reset {
            while let Some(p) = self.pending.pop_front() {
                out.push(Transition {
                    n_step_reward: self.discounted(&p.rewards),
                    obs: p.obs,
                    action: p.action,
                    next_obs: next_obs.to_vec(),
                    discount: 0.0,
                    truncated: true,
                });
            }
        } else if self.pending.front().is_some_and(|p| p.rewards.len() == self.n) {
            let p = self.pending.pop_front().unwrap();
            out.push(Transition {
                n_step_reward: self.discounted(&p.rewards),
                obs: p.obs,
                action: p.action,
                next_obs: next_obs.to_vec(),
                discount: self.gamma.powi(self.n as i32),
                truncated: false,
            });
        }
        out
    }

    /// End of stream: emit every pending entry as a shorter return that still
    /// bootstraps from `next_obs` with `gamma^k` for its `k` rewards.
    pub fn finish(&mut self, next_obs: &[f64]) -> Vec<Transition> {
        let mut out = Vec::with_capacity(self.pending.len());
        while let Some(p) = self.pending.pop_front() {
            out.push(Transition {
                n_step_reward: self.discounted(&p.rewards),
                discount: self.gamma.powi(p.rewards.len() as i32),
                obs: p.obs,
                action: p.action,
                next_obs: next_obs.to_vec(),
                truncated: false,
            });
        }
        out
    }
}

/// Array-backed binary tree of priority sums.
///
/// Leaves live at `[size, 2·size)` of a 1-based heap where `size` is the
/// capacity rounded up to a power of two, so leaf order matches index order.
#[derive(Debug, Clone)]
pub struct SumTree {
    capacity: usize,
    size: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "sum tree capacity must be positive");
        let size = capacity.next_power_of_two();
        SumTree { capacity, size, nodes: vec![0.0; 2 * size] }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[self.size + leaf]
    }

    pub fn set(&mut self, leaf: usize, priority: f64) -> Result<()> {
        if leaf >= self.capacity {
            return Err(Error::Argument(format!("leaf {leaf} outside capacity {}", self.capacity)));
        }
        if !(priority >= 0.0) || !priority.is_finite() {
            return Err(Error::Argument(format!("priority {priority} must be finite and non-negative")));
        }
        let mut i = self.size + leaf;
        self.nodes[i] = priority;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
        Ok(())
    }

    /// Leaf whose cumulative interval contains `u`.
    pub fn sample(&self, u: f64) -> Result<usize> {
        if !(self.total() > 0.0) {
            return Err(Error::State("cannot sample from an empty sum tree".into()));
        }
        let mut u = u.max(0.0);
        let mut i = 1;
        while i < self.size {
            let left = self.nodes[2 * i];
            if u < left || self.nodes[2 * i + 1] <= 0.0 {
                i *= 2;
            } else {
                u -= left;
                i = 2 * i + 1;
            }
        }
        Ok((i - self.size).min(self.capacity - 1))
    }

    /// Internal node `i` (1-based) and its children, for consistency checks.
    pub fn node_sums(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        (1..self.size).map(move |i| (self.nodes[i], self.nodes[2 * i], self.nodes[2 * i + 1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub alpha: f64,
    pub beta_start: f64,
    pub epsilon_priority: f64,
    /// One draw per equal-mass segment; independent draws otherwise.
    pub stratified: bool,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig { capacity: 100_000, alpha: 0.5, beta_start: 0.4, epsilon_priority: 1e-6, stratified: true }
    }
}

#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub indices: Vec<usize>,
    pub transitions: Vec<Transition>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PrioritizedReplay {
    pub config: ReplayConfig,
    tree: SumTree,
    storage: Vec<Transition>,
    cursor: usize,
    beta: f64,
    max_priority: f64,
}

impl PrioritizedReplay {
    pub fn new(config: ReplayConfig) -> Result<Self> {
        if config.capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        if config.alpha < 0.0 || !(0.0..=1.0).contains(&config.beta_start) || !(config.epsilon_priority > 0.0) {
            return Err(Error::Config("replay requires alpha ≥ 0, beta in [0,1], epsilon > 0".into()));
        }
        Ok(PrioritizedReplay {
            tree: SumTree::new(config.capacity),
            storage: Vec::with_capacity(config.capacity.min(1 << 16)),
            cursor: 0,
            beta: config.beta_start,
            max_priority: 1.0,
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn set_beta(&mut self, beta: f64) {
        self.beta = beta.clamp(0.0, 1.0);
    }

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.storage.get(index)
    }

    /// Store a transition at the current maximum priority, overwriting the
    /// oldest slot once full. Returns the slot index.
    pub fn add(&mut self, t: Transition) -> usize {
        let slot = self.cursor;
        if self.storage.len() < self.config.capacity {
            self.storage.push(t);
        } else {
            self.storage[slot] = t;
        }
        self.tree.set(slot, self.max_priority).expect("max priority is positive");
        self.cursor = (self.cursor + 1) % self.config.capacity;
        slot
    }

    /// Overwrite a slot's raw priority (already exponentiated).
    pub fn set_priority(&mut self, index: usize, priority: f64) -> Result<()> {
        if index >= self.storage.len() {
            return Err(Error::Argument(format!("replay index {index} out of range {}", self.storage.len())));
        }
        self.tree.set(index, priority)?;
        self.max_priority = self.max_priority.max(priority);
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<SampledBatch> {
        let size = self.storage.len();
        if batch == 0 || size < batch {
            return Err(Error::State(format!("replay holds {size} transitions, batch needs {batch}")));
        }
        let total = self.tree.total();
        let segment = total / batch as f64;
        let mut indices = Vec::with_capacity(batch);
        for k in 0..batch {
            let u = if self.config.stratified {
                (k as f64 + rng.gen::<f64>()) * segment
            } else {
                rng.gen::<f64>() * total
            };
            let mut idx = self.tree.sample(u.min(total))?;
            if idx >= size {
                idx = size - 1;
            }
            indices.push(idx);
        }
        let raw: Vec<f64> = indices
            .iter()
            .map(|&i| (size as f64 * self.tree.get(i) / total).powf(-self.beta))
            .collect();
        let max = raw.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
        let weights = raw.iter().map(|w| w / max).collect();
        let transitions = indices.iter().map(|&i| self.storage[i].clone()).collect();
        Ok(SampledBatch { indices, transitions, weights })
    }

    /// `priority = (|δ| + ε)^α`
    pub fn update(&mut self, indices: &[usize], td_errors: &[f64]) -> Result<()> {
        if indices.len() != td_errors.len() {
            return Err(Error::Argument("indices and td errors differ in length".into()));
        }
        for (&i, &d) in indices.iter().zip(td_errors) {
            let p = (d.abs() + self.config.epsilon_priority).powf(self.config.alpha);
            self.set_priority(i, p)?;
        }
        Ok(())
    }
}

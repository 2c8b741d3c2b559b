//! DQN training logic: epsilon-greedy acting with a linear decay schedule,
//! a uniform replay pool and TD targets from a periodically synced target
//! network.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::env::{Action, Observation};
use crate::error::{Error, Result};
use crate::qnet::{self, GradientSet, NetworkParams, QValues};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub epsilon_start: f64,
    pub epsilon_min: f64,
    /// Linear decrement of epsilon per environment step.
    pub epsilon_decay: f64,
    pub batch_size: usize,
    pub pool_capacity: usize,
    /// Copy online weights into the target network every this many
    /// training iterations.
    pub sync_every: u64,
    /// Clip batch-averaged gradients elementwise to `[-grad_clip, grad_clip]`.
    pub clip_gradients: bool,
    pub grad_clip: f64,
    pub train_schedule: TrainSchedule,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            learning_rate: 0.001,
            epsilon_start: 0.9,
            epsilon_min: 0.1,
            epsilon_decay: 4e-6,
            batch_size: 32,
            pool_capacity: 2000,
            sync_every: 5000,
            clip_gradients: true,
            grad_clip: 1.0,
            train_schedule: TrainSchedule::PerStep,
        }
    }
}

/// When training iterations run relative to environment interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainSchedule {
    /// One iteration after every environment step.
    PerStep,
    /// One iteration at the end of every episode.
    PerEpisode,
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("agent: {msg}")));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0 < self.epsilon_min
            && self.epsilon_min <= self.epsilon_start
            && self.epsilon_start <= 1.0)
        {
            return bad("epsilon must satisfy 0 < epsilon_min <= epsilon_start <= 1");
        }
        if !(self.epsilon_decay > 0.0) {
            return bad("epsilon_decay must be > 0");
        }
        if self.batch_size == 0 || self.pool_capacity < self.batch_size {
            return bad("need 0 < batch_size <= pool_capacity");
        }
        if self.sync_every == 0 {
            return bad("sync_every must be > 0");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be > 0");
        }
        Ok(())
    }

    /// First environment step at which epsilon sits on its floor.
    pub fn epsilon_floor_step(&self) -> u64 {
        // the small offset absorbs rounding in the quotient
        (((self.epsilon_start - self.epsilon_min) / self.epsilon_decay) - 1e-6)
            .ceil()
            .max(0.0) as u64
    }

    /// Exploration rate after `steps` environment steps.
    pub fn epsilon_at(&self, steps: u64) -> f64 {
        if steps >= self.epsilon_floor_step() {
            self.epsilon_min
        } else {
            (self.epsilon_start - steps as f64 * self.epsilon_decay).max(self.epsilon_min)
        }
    }
}

/// One linear decay step, floored at `epsilon_min`.
pub fn decay_epsilon(epsilon: f64, cfg: &AgentConfig) -> f64 {
    let next = epsilon - cfg.epsilon_decay;
    if next <= cfg.epsilon_min + cfg.epsilon_decay * 1e-6 {
        cfg.epsilon_min
    } else {
        next
    }
}

/// Index of the largest Q-value; ties go to the lowest index.
pub fn argmax(q: &QValues) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// With probability `epsilon` a uniformly random action, otherwise greedy.
pub fn select_action<R: RngCore + ?Sized>(q: &QValues, epsilon: f64, rng: &mut R) -> usize {
    let explore: f64 = rng.random();
    if explore < epsilon {
        rng.random_range(0..Action::COUNT)
    } else {
        argmax(q)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Observation,
    pub terminal: bool,
}

/// Fixed-capacity ring buffer; once full, each push overwrites the oldest
/// transition.
#[derive(Clone, Debug)]
pub struct ReplayPool {
    items: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayPool {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay pool capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity),
            capacity,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Transitions from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity {
            0
        } else {
            self.cursor
        };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices<R: RngCore + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn sample<R: RngCore + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        self.sample_indices(n, rng)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

/// `R` for terminal transitions, otherwise `R + gamma * max_a Q(next, a; target)`.
pub fn td_targets(batch: &[&Transition], target: &NetworkParams, gamma: f64) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|t| {
            if t.terminal {
                Ok(t.reward)
            } else {
                let q = qnet::forward(target, t.next_obs.as_slice())?;
                let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Ok(t.reward + gamma * best)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainStep {
    /// The pool holds fewer transitions than one batch; nothing changed.
    Underfull,
    Trained { loss: f64 },
}

/// Batch-averaged squared TD loss and gradients over `batch`.
pub fn batch_loss(
    online: &NetworkParams,
    batch: &[&Transition],
    targets: &[f64],
) -> Result<(f64, GradientSet)> {
    let mut grads = GradientSet::zeros();
    let mut loss = 0.0;
    for (t, &y) in batch.iter().zip(targets) {
        let (l, g) = qnet::backward(online, t.obs.as_slice(), t.action, y)?;
        loss += l;
        grads.add_assign(&g)?;
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

/// Samples one batch uniformly and applies one gradient step to `online`.
pub fn train_iteration<R: RngCore + ?Sized>(
    online: &mut NetworkParams,
    target: &NetworkParams,
    pool: &ReplayPool,
    cfg: &AgentConfig,
    rng: &mut R,
) -> Result<TrainStep> {
    if pool.len() < cfg.batch_size {
        return Ok(TrainStep::Underfull);
    }
    let batch = pool.sample(cfg.batch_size, rng);
    let targets = td_targets(&batch, target, cfg.gamma)?;
    let (loss, mut grads) = batch_loss(online, &batch, &targets)?;
    if cfg.clip_gradients {
        grads.clip(cfg.grad_clip);
    }
    qnet::apply_gradients(online, &grads, cfg.learning_rate)?;
    Ok(TrainStep::Trained { loss })
}

/// Copies `online` into `target` when `iteration` is a positive multiple of
/// `every`. Returns whether a copy happened.
pub fn maybe_sync_target(
    online: &NetworkParams,
    target: &mut NetworkParams,
    iteration: u64,
    every: u64,
) -> bool {
    if iteration > 0 && iteration.is_multiple_of(every) {
        target.clone_from(online);
        true
    } else {
        false
    }
}

/// Online/target networks, replay pool and counters of one learning agent.
#[derive(Clone, Debug)]
pub struct DqnAgent {
    pub cfg: AgentConfig,
    pub online: NetworkParams,
    pub target: NetworkParams,
    pub pool: ReplayPool,
    /// Environment steps taken while training; drives epsilon.
    pub env_steps: u64,
    /// Gradient steps applied so far.
    pub iterations: u64,
}

impl DqnAgent {
    pub fn new(cfg: AgentConfig, init_seed: u64) -> Self {
        let online = qnet::init_network(init_seed);
        Self::from_params(cfg, online)
    }

    pub fn from_params(cfg: AgentConfig, online: NetworkParams) -> Self {
        let pool = ReplayPool::new(cfg.pool_capacity);
        Self {
            target: online.clone(),
            online,
            pool,
            cfg,
            env_steps: 0,
            iterations: 0,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.cfg.epsilon_at(self.env_steps)
    }

    pub fn q_values(&self, obs: &Observation) -> Result<QValues> {
        qnet::forward(&self.online, obs.as_slice())
    }

    pub fn act<R: RngCore + ?Sized>(&self, obs: &Observation, rng: &mut R) -> Result<usize> {
        let q = self.q_values(obs)?;
        Ok(select_action(&q, self.epsilon(), rng))
    }

    pub fn greedy(&self, obs: &Observation) -> Result<usize> {
        Ok(argmax(&self.q_values(obs)?))
    }

    /// Stores a transition and advances the exploration schedule by one step.
    pub fn observe(&mut self, t: Transition) {
        self.pool.push(t);
        self.env_steps += 1;
    }

    /// One training iteration plus the periodic target sync.
    pub fn train<R: RngCore + ?Sized>(&mut self, rng: &mut R) -> Result<TrainStep> {
        let step = train_iteration(&mut self.online, &self.target, &self.pool, &self.cfg, rng)?;
        if let TrainStep::Trained { .. } = step {
            self.iterations += 1;
            maybe_sync_target(&self.online, &mut self.target, self.iterations, self.cfg.sync_every);
        }
        Ok(step)
    }
}

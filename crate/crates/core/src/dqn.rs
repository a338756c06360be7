//! Deep Q-learning for power allocation.
//!
//! Two environments are provided. [`OfdmEnv`] grows the power of one
//! subcarrier by `δ` per action until the budget is exhausted. [`ScEnv`]
//! walks the users of a paired multi-cell network in index order and sets the
//! serving BS's power to one of `A` discrete levels. The reward of every
//! action is the network sum rate after it.
//!
//! The agent is a vanilla DQN: a single value estimator, a FIFO knowledge
//! base, ε-greedy exploration with a linear schedule and one warmup phase
//! that collects experience without training.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::warn;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::GainTensor;
use crate::error::{ensure, Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, Init, ModelSpec, Network};
use crate::optim::{self, Association, NetworkConfig, PowerAllocation, SystemModel};

/// One `(s, a, r, s', done)` transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Bounded replay buffer; the oldest experience is evicted first.
///
/// Experiences are stored in flat ring arrays sized at the first push, so a
/// long run does not keep millions of small allocations alive.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    capacity: usize,
    state_dim: usize,
    next_dim: usize,
    states: Vec<f64>,
    next_states: Vec<f64>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    done: Vec<bool>,
    // Slot of the oldest experience once the ring is full.
    head: usize,
}

impl KnowledgeBase {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            state_dim: 0,
            next_dim: 0,
            states: Vec::new(),
            next_states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            done: Vec::new(),
            head: 0,
        }
    }

    pub fn push(&mut self, e: Experience) -> Result<()> {
        if self.actions.is_empty() {
            self.state_dim = e.state.len();
            self.next_dim = e.next_state.len();
        }
        ensure!(
            e.state.len() == self.state_dim && e.next_state.len() == self.next_dim,
            Shape,
            "experience widths ({}, {}) differ from the stored ({}, {})",
            e.state.len(),
            e.next_state.len(),
            self.state_dim,
            self.next_dim
        );
        if self.actions.len() < self.capacity {
            self.states.extend_from_slice(&e.state);
            self.next_states.extend_from_slice(&e.next_state);
            self.actions.push(e.action);
            self.rewards.push(e.reward);
            self.done.push(e.done);
        } else {
            let i = self.head;
            self.states[i * self.state_dim..(i + 1) * self.state_dim].copy_from_slice(&e.state);
            self.next_states[i * self.next_dim..(i + 1) * self.next_dim].copy_from_slice(&e.next_state);
            self.actions[i] = e.action;
            self.rewards[i] = e.reward;
            self.done[i] = e.done;
            self.head = (self.head + 1) % self.capacity;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// The `k`-th oldest experience.
    pub fn get(&self, k: usize) -> Option<Experience> {
        (k < self.len()).then(|| self.slot((self.head + k) % self.len()))
    }

    fn slot(&self, i: usize) -> Experience {
        Experience {
            state: self.states[i * self.state_dim..(i + 1) * self.state_dim].to_vec(),
            action: self.actions[i],
            reward: self.rewards[i],
            next_state: self.next_states[i * self.next_dim..(i + 1) * self.next_dim].to_vec(),
            done: self.done[i],
        }
    }

    /// Oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = Experience> + '_ {
        (0..self.len()).map(|k| self.slot((self.head + k) % self.len()))
    }

    /// `n` distinct experiences chosen uniformly (all of them if fewer).
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Experience> {
        let n = n.min(self.len());
        index::sample(rng, self.len(), n).into_iter().map(|i| self.slot(i)).collect()
    }
}

/// Linear ε decay from `start` to `end` over `anneal_episodes`, then flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_episodes: usize,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self { start: 0.8, end: 0.01, anneal_episodes: 1000 }
    }
}

impl EpsilonSchedule {
    /// ε for training episode `episode` (counted from the end of warmup).
    pub fn value(&self, episode: usize) -> f64 {
        if self.anneal_episodes == 0 || episode >= self.anneal_episodes {
            return self.end;
        }
        self.start + (self.end - self.start) * episode as f64 / self.anneal_episodes as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Every episode starts from zero power.
    Zero,
    /// Every episode starts from the previous episode's final powers.
    CarryOver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    /// Greedy (ε = 0) and no learning.
    Predict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DqnConfig {
    /// Γ.
    pub discount: f64,
    pub adam: AdamConfig,
    /// A: discrete power levels of the single-carrier environment.
    pub levels: usize,
    /// δ as a fraction of the budget (OFDM environment).
    pub delta_fraction: f64,
    /// I: actions per episode; `None` uses the environment default.
    pub steps_per_episode: Option<usize>,
    pub warmup_episodes: usize,
    pub init_mode: InitMode,
    pub epsilon: EpsilonSchedule,
    pub capacity: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    /// Multiplier applied to rewards before they enter the knowledge base;
    /// logged rewards stay unscaled.
    pub reward_scale: f64,
    pub seed: u64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            discount: 0.99,
            adam: AdamConfig::default(),
            levels: 10,
            delta_fraction: 0.05,
            steps_per_episode: None,
            warmup_episodes: 1,
            init_mode: InitMode::Zero,
            epsilon: EpsilonSchedule::default(),
            capacity: 50_000,
            batch_size: 32,
            hidden: vec![128; 3],
            reward_scale: 1.0,
            seed: 0,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..=1.0).contains(&self.discount), Config, "discount must lie in [0, 1]");
        ensure!(self.levels >= 2, Config, "need at least two power levels");
        ensure!(self.delta_fraction > 0.0 && self.delta_fraction <= 1.0, Config, "delta must lie in (0, 1] of the budget");
        ensure!(self.steps_per_episode != Some(0), Config, "episodes need at least one step");
        ensure!(self.reward_scale > 0.0 && self.reward_scale.is_finite(), Config, "reward_scale must be positive");
        ensure!(self.capacity >= 1 && self.batch_size >= 1, Config, "capacity and batch size must be positive");
        ensure!(
            (0.0..=1.0).contains(&self.epsilon.start) && (0.0..=1.0).contains(&self.epsilon.end),
            Config,
            "epsilon bounds must lie in [0, 1]"
        );
        Ok(())
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment {
    fn state_dim(&self) -> usize;
    fn num_actions(&self) -> usize;
    /// Starts an episode on new gains. Returns the first state and whether a
    /// carry-over request fell back to zero powers.
    fn reset(&mut self, gains: GainTensor, init: InitMode) -> Result<(Vec<f64>, bool)>;
    fn step(&mut self, action: usize) -> Result<Step>;
    /// Current allocation.
    fn allocation(&self) -> PowerAllocation;
    /// Sum rate of the current allocation.
    fn rate(&self) -> f64;
}

/// Link SNR at full power, in tens of dB, as a bounded input feature.
fn snr_feature(gain_power: f64, cfg: &NetworkConfig) -> f64 {
    let snr = gain_power * cfg.p_max / cfg.sigma2;
    (10.0 * snr.max(1e-30).log10() / 10.0).clamp(-10.0, 20.0)
}

/// Multi-carrier single-link environment: each action adds `δ` to one subcarrier.
#[derive(Debug, Clone)]
pub struct OfdmEnv {
    cfg: NetworkConfig,
    delta: f64,
    steps: usize,
    gains: GainTensor,
    features: Vec<f64>,
    powers: Vec<f64>,
    last: Option<Vec<f64>>,
    step: usize,
}

impl OfdmEnv {
    pub fn new(cfg: NetworkConfig, dqn: &DqnConfig) -> Result<Self> {
        cfg.validate()?;
        ensure!(cfg.num_bs == 1 && cfg.num_users == 1, Config, "the OFDM environment is single-link");
        let n = cfg.num_subcarriers;
        Ok(Self {
            delta: dqn.delta_fraction * cfg.p_max,
            steps: dqn.steps_per_episode.unwrap_or(4 * n),
            gains: GainTensor::zeros(1, 1, n),
            features: vec![0.0; n],
            powers: vec![0.0; n],
            last: None,
            step: 0,
            cfg,
        })
    }

    fn state(&self) -> Vec<f64> {
        let mut s = self.features.clone();
        s.extend(self.powers.iter().map(|p| p / self.cfg.p_max));
        s
    }
}

impl Environment for OfdmEnv {
    fn state_dim(&self) -> usize {
        2 * self.cfg.num_subcarriers
    }

    fn num_actions(&self) -> usize {
        self.cfg.num_subcarriers
    }

    fn reset(&mut self, gains: GainTensor, init: InitMode) -> Result<(Vec<f64>, bool)> {
        ensure!(gains.num_subcarriers == self.cfg.num_subcarriers && gains.num_bs == 1 && gains.num_users == 1,
            Shape, "gains do not match the OFDM environment");
        self.features = (0..self.cfg.num_subcarriers).map(|n| snr_feature(gains.power(0, 0, n), &self.cfg)).collect();
        self.gains = gains;
        self.step = 0;
        let fell_back = match (init, &self.last) {
            (InitMode::CarryOver, Some(p)) => {
                self.powers = p.clone();
                false
            }
            (InitMode::CarryOver, None) => {
                warn!("carry-over requested before any episode; starting from zero power");
                self.powers.iter_mut().for_each(|p| *p = 0.0);
                true
            }
            (InitMode::Zero, _) => {
                self.powers.iter_mut().for_each(|p| *p = 0.0);
                false
            }
        };
        Ok((self.state(), fell_back))
    }

    fn step(&mut self, action: usize) -> Result<Step> {
        ensure!(action < self.num_actions(), Param, "action {action} out of range");
        self.powers[action] += self.delta;
        self.step += 1;
        let total: f64 = self.powers.iter().sum();
        let violated = total > self.cfg.p_max * (1.0 + 1e-9);
        let reward = if violated { 0.0 } else { self.rate() };
        let done = violated || self.step >= self.steps;
        if done {
            self.last = Some(self.powers.clone());
        }
        Ok(Step { next_state: self.state(), reward, done })
    }

    fn allocation(&self) -> PowerAllocation {
        let mut a = PowerAllocation::zeros(&self.cfg);
        a.p.copy_from_slice(&self.powers);
        a
    }

    fn rate(&self) -> f64 {
        let kappa = self.cfg.kappa();
        (0..self.cfg.num_subcarriers)
            .map(|n| (1.0 + kappa * self.gains.power(0, 0, n) * self.powers[n] / self.cfg.sigma2).log2())
            .sum()
    }
}

/// Paired single-carrier multi-cell environment; one action sets one BS's power level.
#[derive(Debug, Clone)]
pub struct ScEnv {
    cfg: NetworkConfig,
    levels: usize,
    steps: usize,
    gains_sq: Vec<f64>,
    features: Vec<f64>,
    powers: Vec<f64>,
    rates: Vec<f64>,
    last: Option<Vec<f64>>,
    user: usize,
    step: usize,
}

impl ScEnv {
    pub fn new(cfg: NetworkConfig, dqn: &DqnConfig) -> Result<Self> {
        cfg.validate()?;
        ensure!(
            cfg.num_bs == cfg.num_users && cfg.num_subcarriers == 1,
            Config,
            "the single-carrier environment pairs B BSs with B users"
        );
        let b = cfg.num_bs;
        Ok(Self {
            levels: dqn.levels,
            steps: dqn.steps_per_episode.unwrap_or(b * dqn.levels),
            gains_sq: vec![0.0; b * b],
            features: vec![0.0; b * b],
            powers: vec![0.0; b],
            rates: vec![0.0; b],
            last: None,
            user: 0,
            step: 0,
            cfg,
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Power of level `a`.
    pub fn level_power(&self, a: usize) -> f64 {
        a as f64 * self.cfg.p_max / (self.levels - 1) as f64
    }

    fn update_rates(&mut self) {
        let b = self.cfg.num_bs;
        for u in 0..b {
            let interference: f64 =
                (0..b).filter(|&j| j != u).map(|j| self.gains_sq[j * b + u] * self.powers[j]).sum();
            self.rates[u] = (1.0 + self.gains_sq[u * b + u] * self.powers[u] / (interference + self.cfg.sigma2)).log2();
        }
    }

    /// Observable row of the user about to act: gains from every BS, BS
    /// powers and user rates, each rotated so the acting user comes first.
    pub fn observation(&self, u: usize) -> Vec<f64> {
        let b = self.cfg.num_bs;
        let order = (0..b).map(|k| (u + k) % b);
        let mut s = Vec::with_capacity(3 * b);
        s.extend(order.clone().map(|j| self.features[j * b + u]));
        s.extend(order.clone().map(|j| self.powers[j] / self.cfg.p_max));
        s.extend(order.map(|j| self.rates[j] / 10.0));
        s
    }

    pub fn current_user(&self) -> usize {
        self.user
    }
}

impl Environment for ScEnv {
    fn state_dim(&self) -> usize {
        3 * self.cfg.num_bs
    }

    fn num_actions(&self) -> usize {
        self.levels
    }

    fn reset(&mut self, gains: GainTensor, init: InitMode) -> Result<(Vec<f64>, bool)> {
        let b = self.cfg.num_bs;
        ensure!(gains.num_bs == b && gains.num_users == b && gains.num_subcarriers == 1,
            Shape, "gains do not match the single-carrier environment");
        self.gains_sq = (0..b * b).map(|i| gains.power(i / b, i % b, 0)).collect();
        self.features = self.gains_sq.iter().map(|&g| snr_feature(g, &self.cfg)).collect();
        let fell_back = match (init, &self.last) {
            (InitMode::CarryOver, Some(p)) => {
                self.powers = p.clone();
                false
            }
            (InitMode::CarryOver, None) => {
                warn!("carry-over requested before any episode; starting from zero power");
                self.powers.iter_mut().for_each(|p| *p = 0.0);
                true
            }
            (InitMode::Zero, _) => {
                self.powers.iter_mut().for_each(|p| *p = 0.0);
                false
            }
        };
        self.update_rates();
        self.user = 0;
        self.step = 0;
        Ok((self.observation(0), fell_back))
    }

    fn step(&mut self, action: usize) -> Result<Step> {
        ensure!(action < self.levels, Param, "action {action} out of range");
        self.powers[self.user] = self.level_power(action);
        self.update_rates();
        self.user = (self.user + 1) % self.cfg.num_bs;
        self.step += 1;
        let reward = self.rates.iter().sum();
        let done = self.step >= self.steps;
        if done {
            self.last = Some(self.powers.clone());
        }
        Ok(Step { next_state: self.observation(self.user), reward, done })
    }

    fn allocation(&self) -> PowerAllocation {
        let mut a = PowerAllocation::zeros(&self.cfg);
        for (k, &p) in self.powers.iter().enumerate() {
            a.set(k, k, 0, p);
        }
        a
    }

    fn rate(&self) -> f64 {
        self.rates.iter().sum()
    }
}

/// ε-greedy choice; ties go to the lowest index.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return rng.gen_range(0..q.len());
    }
    argmax(q)
}

pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Per-episode log entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub steps: usize,
    /// Sum of per-step rewards.
    pub total_reward: f64,
    /// Sum rate of the allocation the episode ends with.
    pub final_reward: f64,
    pub epsilon: f64,
    pub wall_time: f64,
    pub warmup: bool,
}

/// The learner: value estimator, optimizer and knowledge base.
#[derive(Debug, Clone)]
pub struct Agent {
    pub net: Network,
    pub config: DqnConfig,
    adam: Adam,
    kb: KnowledgeBase,
    rng: ChaCha8Rng,
    episodes: usize,
    updates: u64,
    // Reused across steps; a fresh buffer per step fragments the heap.
    grad: Vec<f64>,
}

impl Agent {
    pub fn new(state_dim: usize, actions: usize, config: DqnConfig) -> Result<Self> {
        config.validate()?;
        // The default hidden widths reproduce `presets::dqn`.
        let spec = ModelSpec::mlp(state_dim, &config.hidden, actions, Activation::Relu, Activation::Linear);
        let net = Network::new(spec, Init::UniformFanIn, config.seed)?;
        Ok(Self {
            adam: Adam::new(config.adam, net.params.len()),
            kb: KnowledgeBase::new(config.capacity),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0xD0_0D),
            episodes: 0,
            updates: 0,
            grad: vec![0.0; net.params.len()],
            net,
            config,
        })
    }

    pub fn knowledge_base(&self) -> &KnowledgeBase {
        &self.kb
    }

    /// Weight updates performed so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn q_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(state)
    }

    /// One Adam step on `(Q(s, a) - y)²` with `y = r + Γ max Q(s', ·)`
    /// (`y = r` for terminal transitions). Returns the mean TD loss.
    pub fn train_step(&mut self, batch: &[Experience]) -> Result<f64> {
        ensure!(!batch.is_empty(), Runtime, "cannot train on an empty batch");
        let dim = self.net.input_dim();
        let actions = self.net.output_dim();
        let mut next = Vec::with_capacity(batch.len() * dim);
        let mut states = Vec::with_capacity(batch.len() * dim);
        for e in batch {
            next.extend_from_slice(&e.next_state);
            states.extend_from_slice(&e.state);
        }
        let q_next = self.net.forward_batch(&next, batch.len())?;
        let tape = self.net.forward_tape(&states, batch.len())?;
        let q = tape.output();
        let mut d_out = vec![0.0; q.len()];
        let mut loss = 0.0;
        for (s, e) in batch.iter().enumerate() {
            ensure!(e.action < actions, Param, "action {} out of range", e.action);
            let bootstrap = if e.done {
                0.0
            } else {
                self.config.discount * q_next[s * actions..(s + 1) * actions].iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            let y = e.reward + bootstrap;
            let diff = q[s * actions + e.action] - y;
            loss += diff * diff;
            d_out[s * actions + e.action] = 2.0 * diff / batch.len() as f64;
        }
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        self.net.backward(&tape, &d_out, &mut self.grad)?;
        if self.grad.iter().all(|&g| g == 0.0) {
            return Ok(0.0);
        }
        self.adam.step(&mut self.net.params, &self.grad);
        self.updates += 1;
        Ok(loss / batch.len() as f64)
    }

    fn train_from_kb(&mut self) -> Result<Option<f64>> {
        if self.kb.len() < self.config.batch_size {
            return Ok(None);
        }
        let batch = self.kb.sample(self.config.batch_size, &mut self.rng);
        self.train_step(&batch).map(Some)
    }

    /// Runs one episode on `gains`. In `Mode::Train` experiences are stored
    /// and, after warmup, the estimator is updated after every step.
    pub fn run_episode<E: Environment>(&mut self, env: &mut E, gains: GainTensor, mode: Mode) -> Result<EpisodeRecord> {
        let start = Instant::now();
        let warmup = mode == Mode::Train && self.episodes < self.config.warmup_episodes;
        let epsilon = match mode {
            Mode::Predict => 0.0,
            Mode::Train if warmup => self.config.epsilon.start,
            Mode::Train => self.config.epsilon.value(self.episodes - self.config.warmup_episodes),
        };
        let (mut state, _) = env.reset(gains, self.config.init_mode)?;
        let mut total = 0.0;
        let mut steps = 0;
        loop {
            let q = self.q_values(&state)?;
            let action = select_action(&q, epsilon, &mut self.rng);
            let step = env.step(action)?;
            ensure!(step.reward.is_finite(), Runtime, "non-finite reward");
            total += step.reward;
            steps += 1;
            if mode == Mode::Train {
                self.kb.push(Experience {
                    state: std::mem::take(&mut state),
                    action,
                    reward: step.reward * self.config.reward_scale,
                    next_state: step.next_state.clone(),
                    done: step.done,
                })?;
                if !warmup {
                    if let Some(loss) = self.train_from_kb()? {
                        if !loss.is_finite() {
                            return Err(Error::Diverged { epoch: self.episodes, msg: format!("TD loss {loss}") });
                        }
                    }
                }
            }
            state = step.next_state;
            if step.done {
                break;
            }
        }
        let record = EpisodeRecord {
            episode: self.episodes,
            steps,
            total_reward: total,
            final_reward: env.rate(),
            epsilon,
            wall_time: start.elapsed().as_secs_f64(),
            warmup,
        };
        if mode == Mode::Train {
            self.episodes += 1;
        }
        Ok(record)
    }

    /// Greedy allocation for `gains` without learning, with its latency.
    pub fn predict<E: Environment>(&mut self, env: &mut E, gains: GainTensor) -> Result<(PowerAllocation, f64, f64)> {
        let start = Instant::now();
        let record = self.run_episode(env, gains, Mode::Predict)?;
        Ok((env.allocation(), record.final_reward, start.elapsed().as_secs_f64()))
    }
}

/// Trains online over `episodes` channel draws from `next_gains`.
pub fn run_online<E, F>(agent: &mut Agent, env: &mut E, episodes: usize, mut next_gains: F) -> Result<Vec<EpisodeRecord>>
where
    E: Environment,
    F: FnMut(usize) -> Result<GainTensor>,
{
    let start = Instant::now();
    let mut log = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut record = agent.run_episode(env, next_gains(e)?, Mode::Train)?;
        record.wall_time = start.elapsed().as_secs_f64();
        log.push(record);
    }
    Ok(log)
}

/// Rate of a baseline allocation on a paired single-carrier sample.
pub fn baseline_rate(gains: &GainTensor, alloc: &PowerAllocation, cfg: &NetworkConfig) -> Result<f64> {
    optim::rate(SystemModel::Sm2b, gains, alloc, None, &Association::paired(cfg.num_bs), cfg)
}

/// Writes `episode,steps,total_reward,final_reward,epsilon,wall_time,warmup`.
pub fn write_episode_csv(path: &Path, log: &[EpisodeRecord]) -> Result<()> {
    let mut out = String::from("episode,steps,total_reward,final_reward,epsilon,wall_time,warmup\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.episode, r.steps, r.total_reward, r.final_reward, r.epsilon, r.wall_time, r.warmup as u8
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sc_cfg() -> NetworkConfig {
        NetworkConfig::new(3, 3, 1).with_power(1.0, 0.1)
    }

    fn sc_gains() -> GainTensor {
        GainTensor::from_power(3, 3, 1, &[1.0, 0.1, 0.05, 0.2, 2.0, 0.1, 0.02, 0.3, 0.5]).unwrap()
    }

    #[test]
    fn epsilon_schedule() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.value(0), 0.8);
        assert!((s.value(500) - 0.405).abs() < 1e-12);
        assert_eq!(s.value(1000), 0.01);
        assert_eq!(s.value(5000), 0.01);
    }

    #[test]
    fn knowledge_base_is_fifo() {
        let mut kb = KnowledgeBase::new(3);
        for i in 0..5 {
            kb.push(Experience { state: vec![i as f64], action: 0, reward: 0.0, next_state: vec![], done: false }).unwrap();
        }
        assert_eq!(kb.len(), 3);
        let firsts: Vec<f64> = kb.iter().map(|e| e.state[0]).collect();
        assert_eq!(firsts, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn greedy_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(select_action(&[0.1, 0.5, 0.5], 0.0, &mut rng), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    #[test]
    fn sc_env_levels_and_silence() {
        let cfg = sc_cfg();
        let dqn = DqnConfig { levels: 5, ..DqnConfig::default() };
        let mut env = ScEnv::new(cfg.clone(), &dqn).unwrap();
        let (s0, fell_back) = env.reset(sc_gains(), InitMode::Zero).unwrap();
        assert!(!fell_back);
        assert_eq!(s0.len(), 9);
        assert!(s0[3..6].iter().all(|&p| p == 0.0));
        let step = env.step(4).unwrap();
        assert_eq!(env.allocation().get(0, 0, 0), cfg.p_max);
        // Only BS 0 transmits: the reward is its interference-free rate.
        assert!((step.reward - (1.0f64 + 1.0 / 0.1).log2()).abs() < 1e-12);
        let step = env.step(0).unwrap();
        assert_eq!(env.allocation().get(1, 1, 0), 0.0);
        assert!((step.reward - (1.0f64 + 10.0).log2()).abs() < 1e-12);
    }

    #[test]
    fn carry_over_init() {
        let dqn = DqnConfig { levels: 5, steps_per_episode: Some(3), ..DqnConfig::default() };
        let mut env = ScEnv::new(sc_cfg(), &dqn).unwrap();
        let (_, fell_back) = env.reset(sc_gains(), InitMode::CarryOver).unwrap();
        assert!(fell_back);
        for a in [4, 2, 1] {
            env.step(a).unwrap();
        }
        let end = env.allocation();
        let (s, fell_back) = env.reset(sc_gains(), InitMode::CarryOver).unwrap();
        assert!(!fell_back);
        assert_eq!(env.allocation(), end);
        assert_eq!(s[3], 1.0);
    }

    #[test]
    fn ofdm_env_terminates_on_violation() {
        let cfg = NetworkConfig::new(1, 1, 4).with_power(1.0, 1.0);
        let dqn = DqnConfig { delta_fraction: 0.25, steps_per_episode: Some(100), ..DqnConfig::default() };
        let mut env = OfdmEnv::new(cfg, &dqn).unwrap();
        env.reset(GainTensor::from_power(1, 1, 4, &[1.0; 4]).unwrap(), InitMode::Zero).unwrap();
        for _ in 0..4 {
            assert!(!env.step(2).unwrap().done);
        }
        let last = env.step(2).unwrap();
        assert!(last.done);
        assert_eq!(last.reward, 0.0);
    }

    #[test]
    fn fixed_point_and_terminal_targets() {
        let dqn = DqnConfig { hidden: vec![4], ..DqnConfig::default() };
        let mut agent = Agent::new(2, 2, dqn).unwrap();
        let s = vec![0.3, -0.2];
        let q = agent.q_values(&s).unwrap();
        let before = agent.net.params.clone();
        // Terminal transition whose reward equals the current estimate: no update.
        let e = Experience { state: s.clone(), action: 1, reward: q[1], next_state: s.clone(), done: true };
        assert_eq!(agent.train_step(&[e]).unwrap(), 0.0);
        assert_eq!(agent.net.params, before);
        assert!(agent.train_step(&[]).is_err());
    }

    #[test]
    fn bandit_converges_to_reward() {
        let dqn = DqnConfig { hidden: vec![8], adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() }, ..DqnConfig::default() };
        let mut agent = Agent::new(1, 1, dqn).unwrap();
        let e = Experience { state: vec![1.0], action: 0, reward: 3.0, next_state: vec![1.0], done: true };
        for _ in 0..10_000 {
            agent.train_step(std::slice::from_ref(&e)).unwrap();
        }
        assert!((agent.q_values(&[1.0]).unwrap()[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn warmup_does_not_train() {
        let dqn = DqnConfig { levels: 3, warmup_episodes: 2, hidden: vec![8], ..DqnConfig::default() };
        let mut env = ScEnv::new(sc_cfg(), &dqn).unwrap();
        let mut agent = Agent::new(env.state_dim(), env.num_actions(), dqn).unwrap();
        let initial = agent.net.params.clone();
        let log = run_online(&mut agent, &mut env, 2, |_| Ok(sc_gains())).unwrap();
        assert_eq!(log.len(), 2);
        assert!(log.iter().all(|r| r.warmup));
        assert_eq!(agent.net.params, initial);
        assert_eq!(agent.updates(), 0);
        assert!(agent.knowledge_base().len() > 0);
        run_online(&mut agent, &mut env, 3, |_| Ok(sc_gains())).unwrap();
        assert!(agent.updates() > 0);
    }
}

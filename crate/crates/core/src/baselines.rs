//! Reference schemes and paired evaluation: uniform allocation, the
//! water-filling oracle, and an online DDPG learner.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{env_step, sample_gains, spectral_efficiency, EnvConfig, IntentSpec};
use crate::error::{Error, Result};
use crate::expert::waterfill;
use crate::io;
use crate::nn::checkpoint::{Checkpoint, CheckpointMeta};
use crate::nn::{soft_update, Activation, AdamState, Mlp, MlpCache, Module, Tensor2};
use crate::offline_rl::{project_feasible, project_feasible_backward, state_action, BcqLearner};
use crate::par;

/// `P/M` on every channel.
pub fn uniform_alloc(num_channels: usize, total_power: f64) -> Vec<f64> {
    project_feasible(&vec![total_power / num_channels as f64; num_channels], total_power)
}

/// Anything that maps channel gains and a budget to a feasible allocation.
pub trait Policy: Sync {
    fn name(&self) -> &str;
    fn act(&self, gains: &[f64], total_power: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
}

pub struct UniformPolicy;

impl Policy for UniformPolicy {
    fn name(&self) -> &str {
        "uniform"
    }

    fn act(&self, gains: &[f64], total_power: f64, _: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(uniform_alloc(gains.len(), total_power))
    }
}

pub struct WaterfillPolicy {
    pub noise_power: f64,
}

impl Policy for WaterfillPolicy {
    fn name(&self) -> &str {
        "oracle"
    }

    fn act(&self, gains: &[f64], total_power: f64, _: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        waterfill(gains, total_power, self.noise_power)
    }
}

/// A trained BCQ learner acting with `candidates` samples per decision.
pub struct BcqPolicy<'a> {
    pub learner: &'a BcqLearner,
    pub candidates: usize,
}

impl Policy for BcqPolicy<'_> {
    fn name(&self) -> &str {
        "bcq"
    }

    fn act(&self, gains: &[f64], total_power: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        self.learner.policy_act(gains, self.candidates, total_power, rng)
    }
}

/// Evaluation outcome of one scheme in one `(intent, power)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Mean total spectral efficiency over every evaluated step.
    pub mean: f64,
    pub std: f64,
    /// Spectral efficiency per step, averaged over episodes.
    pub per_step: Vec<f64>,
}

/// Stream offset separating policy randomness from state sequences.
const ACTION_STREAMS: u64 = 1 << 32;

/// Runs `episodes` rollouts of `steps` steps each. Episode `e` draws its
/// states from stream `e` of `seed`, so every policy evaluated with the same
/// seed sees the same states.
pub fn evaluate_policy(
    policy: &dyn Policy,
    spec: &IntentSpec,
    env: &EnvConfig,
    total_power: f64,
    episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<EvalSummary> {
    if episodes == 0 || steps == 0 {
        return Err(Error::Config(
            "evaluation needs at least one episode and one step".into(),
        ));
    }
    let runs = par::map_indexed(episodes, |e| -> Result<Vec<f64>> {
        let mut state_rng = par::stream_rng(seed, e as u64);
        let mut act_rng = par::stream_rng(seed, ACTION_STREAMS + e as u64);
        let mut state = sample_gains(spec, env, &mut state_rng);
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let action = policy.act(&state.gains, total_power, &mut act_rng)?;
            let (rewards, next) = env_step(&state, &action, spec, env, total_power, &mut state_rng)?;
            out.push(rewards.iter().sum());
            state = next;
        }
        Ok(out)
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let all: Vec<f64> = runs.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let std = (all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let per_step = (0..steps)
        .map(|t| runs.iter().map(|r| r[t]).sum::<f64>() / episodes as f64)
        .collect();
    Ok(EvalSummary { mean, std, per_step })
}

/// The states [`evaluate_policy`] visits in episode `episode`.
pub fn evaluation_states(spec: &IntentSpec, env: &EnvConfig, steps: usize, seed: u64, episode: usize) -> Vec<Vec<f64>> {
    let mut rng = par::stream_rng(seed, episode as u64);
    (0..steps).map(|_| sample_gains(spec, env, &mut rng).gains).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpgConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub soft_update: f64,
    pub gamma: f64,
    pub hidden: usize,
    pub buffer_capacity: usize,
    /// Initial exploration standard deviation as a fraction of `P/M`.
    pub noise_std: f64,
    /// Fraction of the initial exploration noise left at the last step.
    pub noise_final: f64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            actor_lr: 2e-4,
            critic_lr: 1e-4,
            soft_update: 0.005,
            gamma: 0.1,
            hidden: 64,
            buffer_capacity: 100_000,
            noise_std: 0.1,
            noise_final: 0.1,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config(
                "ddpg batch size, hidden width and buffer must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.soft_update) {
            return Err(Error::Config(
                "ddpg discount must lie in [0, 1) and soft rate in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// One stored transition, in network units.
#[derive(Debug, Clone, PartialEq)]
struct Transition {
    s: Vec<f64>,
    u: Vec<f64>,
    r: f64,
    s_next: Vec<f64>,
}

/// FIFO experience replay.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, s: Vec<f64>, u: Vec<f64>, r: f64, s_next: Vec<f64>) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(Transition { s, u, r, s_next });
    }

    /// Reward of the oldest stored transition.
    pub fn oldest_reward(&self) -> Option<f64> {
        self.items.front().map(|t| t.r)
    }
}

/// Deterministic actor-critic with target networks. Actions are produced
/// in budget-relative units `u = a·M/P`: a tanh head maps the actor onto
/// `[0, M]` per channel (raw `[0, P]`) and the result is projected.
#[derive(Debug, Clone)]
pub struct DdpgLearner {
    pub config: DdpgConfig,
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    opt_actor: AdamState,
    opt_critic: AdamState,
    pub buffer: ReplayBuffer,
    state_mean: f64,
    state_std: f64,
    dim: usize,
    rewards: RunningMoments,
}

/// Welford mean and variance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population standard deviation, floored so a constant stream stays finite.
    pub fn std(&self) -> f64 {
        if self.count < 2 {
            return 1.0;
        }
        (self.m2 / self.count as f64).sqrt().max(1e-6)
    }
}

impl DdpgLearner {
    /// States are standardised with the moments of the intent's gain range.
    pub fn new<R: Rng + ?Sized>(config: DdpgConfig, spec: &IntentSpec, dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let mut actor = Mlp::with_head(&[dim, h, h, dim], Activation::Relu, Activation::Identity, rng)?;
        // small final layer so the policy starts near the uniform split
        if let Some(last) = actor.layers.last_mut() {
            for w in last.weight.data.iter_mut() {
                *w = rng.random_range(-3e-3..3e-3);
            }
        }
        let critic = Mlp::with_head(&[2 * dim, h, h, 1], Activation::Relu, Activation::Identity, rng)?;
        Ok(Self {
            opt_actor: AdamState::new(config.actor_lr),
            opt_critic: AdamState::new(config.critic_lr),
            buffer: ReplayBuffer::new(config.buffer_capacity),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            state_mean: 0.5 * (spec.gain_low + spec.gain_high),
            state_std: (spec.gain_high - spec.gain_low) / 12f64.sqrt(),
            dim,
            config,
            rewards: RunningMoments::default(),
        })
    }

    fn state(&self, gains: &[f64]) -> Vec<f64> {
        gains.iter().map(|g| (g - self.state_mean) / self.state_std).collect()
    }

    fn budget(&self) -> f64 {
        self.dim as f64
    }

    /// Actor output mapped through the tanh head onto `[0, M]` per
    /// channel, before projection.
    fn head(&self, t: &Tensor2) -> Tensor2 {
        let half = self.budget() / 2.0;
        t.map(|x| half * (x.tanh() + 1.0))
    }

    fn project_rows(&self, v: &Tensor2) -> Tensor2 {
        let mut w = v.clone();
        for r in 0..v.rows {
            w.row_mut(r).copy_from_slice(&project_feasible(v.row(r), self.budget()));
        }
        w
    }

    fn act_units(&self, net: &Mlp, s: &Tensor2) -> Result<Tensor2> {
        Ok(self.project_rows(&self.head(&net.forward(s)?)))
    }

    /// Greedy allocation for raw gains.
    pub fn act(&self, gains: &[f64], total_power: f64) -> Result<Vec<f64>> {
        let w = self.act_units(&self.actor, &Tensor2::row_vector(&self.state(gains)))?;
        let raw: Vec<f64> = w.data.iter().map(|x| x * total_power / self.budget()).collect();
        Ok(project_feasible(&raw, total_power))
    }

    fn update<R: Rng + ?Sized>(&mut self, rng: &mut R, step: usize) -> Result<()> {
        let b = self.config.batch_size;
        let m = self.dim;
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.buffer.len())).collect();
        let mut s = Tensor2::zeros(b, m);
        let mut u = Tensor2::zeros(b, m);
        let mut s_next = Tensor2::zeros(b, m);
        let mut r = vec![0.0; b];
        let (r_mean, r_std) = (self.rewards.mean(), self.rewards.std());
        for (row, &i) in idx.iter().enumerate() {
            let t = &self.buffer.items[i];
            s.row_mut(row).copy_from_slice(&t.s);
            u.row_mut(row).copy_from_slice(&t.u);
            s_next.row_mut(row).copy_from_slice(&t.s_next);
            r[row] = (t.r - r_mean) / r_std;
        }
        let diverged = |what: &str, v: f64| Error::Divergence {
            step,
            detail: format!("{what} is {v}"),
        };

        let next_u = self.act_units(&self.actor_target, &s_next)?;
        let next_q = self.critic_target.forward(&state_action(&s_next, &next_u))?;
        let cache = self.critic.forward_cached(&state_action(&s, &u))?;
        let mut grad = Tensor2::zeros(b, 1);
        let mut loss = 0.0;
        for i in 0..b {
            let y = r[i] + self.config.gamma * next_q.data[i];
            let d = cache.output().data[i] - y;
            loss += d * d / b as f64;
            grad.data[i] = 2.0 * d / b as f64;
        }
        if !loss.is_finite() {
            return Err(diverged("critic loss", loss));
        }
        self.critic.zero_grad();
        self.critic.backward(&cache, &grad);
        self.opt_critic.step(&mut self.critic)?;

        let acache: MlpCache = self.actor.forward_cached(&s)?;
        let v = self.head(acache.output());
        let w = self.project_rows(&v);
        let qcache = self.critic.forward_cached(&state_action(&s, &w))?;
        let objective = qcache.output().sum() / b as f64;
        if !objective.is_finite() {
            return Err(diverged("actor objective", objective));
        }
        let dq = Tensor2 {
            rows: b,
            cols: 1,
            data: vec![-1.0 / b as f64; b],
        };
        let dinput = self.critic.input_grad(&qcache, &dq);
        let mut dpre = Tensor2::zeros(b, m);
        for row in 0..b {
            let dv = project_feasible_backward(v.row(row), self.budget(), &dinput.row(row)[m..]);
            let pre = acache.output().row(row);
            for ((o, d), x) in dpre.row_mut(row).iter_mut().zip(dv).zip(pre) {
                let t = x.tanh();
                *o = d * self.budget() / 2.0 * (1.0 - t * t);
            }
        }
        self.actor.zero_grad();
        self.actor.backward(&acache, &dpre);
        self.opt_actor.step(&mut self.actor)?;

        soft_update(&mut self.critic_target, &self.critic, self.config.soft_update)?;
        soft_update(&mut self.actor_target, &self.actor, self.config.soft_update)?;
        Ok(())
    }
}

pub const DDPG_VERSION: u32 = 1;

/// Saved DDPG networks and input scaling. The replay buffer and optimiser
/// moments are not persisted; a loaded learner acts identically but resumes
/// training from fresh optimiser state.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DdpgFile {
    format_version: u32,
    config: DdpgConfig,
    dim: usize,
    state_mean: f64,
    state_std: f64,
    rewards: RunningMoments,
    checkpoint: Checkpoint,
}

impl DdpgLearner {
    pub fn save(&self, path: &Path, meta: CheckpointMeta) -> Result<String> {
        let mut ck = Checkpoint::new(meta);
        ck.add("actor", &self.actor);
        ck.add("critic", &self.critic);
        ck.add("actor_target", &self.actor_target);
        ck.add("critic_target", &self.critic_target);
        io::write_json(
            path,
            &DdpgFile {
                format_version: DDPG_VERSION,
                config: self.config.clone(),
                dim: self.dim,
                state_mean: self.state_mean,
                state_std: self.state_std,
                rewards: self.rewards.clone(),
                checkpoint: ck,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: DdpgFile = io::read_json(path)?;
        io::check_version(path, file.format_version, DDPG_VERSION)?;
        let spec = IntentSpec {
            intent_id: 0,
            gain_low: 0.0,
            gain_high: 1.0,
            label: String::new(),
        };
        let mut learner = Self::new(file.config, &spec, file.dim, &mut par::stream_rng(0, 0))?;
        let ck = &file.checkpoint;
        ck.restore("actor", &mut learner.actor)?;
        ck.restore("critic", &mut learner.critic)?;
        ck.restore("actor_target", &mut learner.actor_target)?;
        ck.restore("critic_target", &mut learner.critic_target)?;
        learner.state_mean = file.state_mean;
        learner.state_std = file.state_std;
        learner.rewards = file.rewards;
        Ok(learner)
    }
}

impl Policy for DdpgLearner {
    fn name(&self) -> &str {
        "ddpg"
    }

    fn act(&self, gains: &[f64], total_power: f64, _: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        DdpgLearner::act(self, gains, total_power)
    }
}

/// Online DDPG in the live environment for `config.steps` steps with
/// Gaussian exploration decayed linearly. Returns the learner and the
/// spectral efficiency of every executed action.
pub fn ddpg_train(
    spec: &IntentSpec,
    env: &EnvConfig,
    total_power: f64,
    config: &DdpgConfig,
    seed: u64,
) -> Result<(DdpgLearner, Vec<f64>)> {
    if config.steps == 0 {
        return Err(Error::Config("ddpg needs at least one step".into()));
    }
    let m = env.num_channels;
    let mut init = par::stream_rng(seed, 0);
    let mut learner = DdpgLearner::new(config.clone(), spec, m, &mut init)?;
    let mut env_rng = par::stream_rng(seed, 1);
    let mut rng = par::stream_rng(seed, 2);
    let mut state = sample_gains(spec, env, &mut env_rng);
    let mut series = Vec::with_capacity(config.steps);
    let scale = total_power / m as f64;
    for step in 0..config.steps {
        let progress = if config.steps > 1 {
            step as f64 / (config.steps - 1) as f64
        } else {
            0.0
        };
        let std = config.noise_std * (1.0 - (1.0 - config.noise_final) * progress);
        let s = learner.state(&state.gains);
        let greedy = learner.act_units(&learner.actor, &Tensor2::row_vector(&s))?;
        let noise = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let noisy: Vec<f64> = greedy.data.iter().map(|x| x + noise.sample(&mut rng)).collect();
        let u = project_feasible(&noisy, learner.budget());
        let raw: Vec<f64> = u.iter().map(|x| x * scale).collect();
        let action = project_feasible(&raw, total_power);
        let (rewards, next) = env_step(&state, &action, spec, env, total_power, &mut env_rng)?;
        let se: f64 = rewards.iter().sum();
        series.push(se);
        let s_next = learner.state(&next.gains);
        learner.rewards.push(se);
        learner.buffer.push(s, u, se, s_next);
        if learner.buffer.len() >= config.batch_size {
            learner.update(&mut rng, step)?;
        }
        state = next;
    }
    Ok((learner, series))
}

/// Spectral efficiency of the oracle on given states.
pub fn oracle_se(states: &[Vec<f64>], total_power: f64, noise_power: f64) -> Result<Vec<f64>> {
    states
        .iter()
        .map(|g| spectral_efficiency(g, &waterfill(g, total_power, noise_power)?, noise_power))
        .collect()
}

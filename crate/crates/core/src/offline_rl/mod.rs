//! Batch-constrained Q-learning on generated transitions.
//!
//! Actions are handled in budget-relative units `u = a·M/P`, so `u = 1` on
//! every channel is the uniform allocation and one learner serves every
//! total-power budget. Generated actions are rescaled to spend the whole
//! budget before training; emitted actions are `P·u/M` projected onto the
//! feasible set.

mod nets;

pub use nets::{gaussian_kl, q_network, state_action, PerturbNet, VaeLosses, VaePolicy, LOG_STD_RANGE};

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{env_step, sample_gains, EnvConfig, IntentSpec};
use crate::error::{Error, Result};
use crate::expert::Trajectory;
use crate::io;
use crate::nn::checkpoint::{Checkpoint, CheckpointMeta};
use crate::nn::{soft_update, AdamState, Mlp, Module, Tensor2};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcqConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// Perturbation bound, in budget-relative units.
    pub phi: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub candidates: usize,
    pub soft_update: f64,
    pub hidden: usize,
    /// Latent width; `None` means twice the channel count.
    #[serde(default)]
    pub latent_dim: Option<usize>,
    /// Learning rate of the VAE and the perturbation network.
    pub actor_lr: f64,
    /// Learning rate of both Q networks.
    pub critic_lr: f64,
}

impl Default for BcqConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            lambda: 0.75,
            phi: 0.05,
            batch_size: 100,
            iterations: 2000,
            candidates: 10,
            soft_update: 0.1,
            hidden: 32,
            latent_dim: None,
            actor_lr: 2e-4,
            critic_lr: 1e-4,
        }
    }
}

impl BcqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("discount {} outside [0, 1)", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("double-Q weight {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.soft_update) {
            return Err(Error::Config(format!(
                "soft update rate {} outside [0, 1]",
                self.soft_update
            )));
        }
        if self.candidates == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "candidate count, batch size and hidden width must be positive".into(),
            ));
        }
        if !(self.phi >= 0.0) {
            return Err(Error::Config(format!("perturbation bound {} is negative", self.phi)));
        }
        Ok(())
    }
}

/// Clamps negative entries to zero, then rescales onto the budget when the
/// total exceeds it. The result satisfies both constraints exactly.
pub fn project_feasible(action: &[f64], total_power: f64) -> Vec<f64> {
    // written so NaN maps to zero as well
    let mut p: Vec<f64> = action.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    let sum: f64 = p.iter().sum();
    if sum > total_power {
        let scale = total_power / sum;
        p.iter_mut().for_each(|x| *x *= scale);
        while p.iter().sum::<f64>() > total_power {
            p.iter_mut().for_each(|x| *x = x.next_down().max(0.0));
        }
    }
    p
}

/// Vector-Jacobian product of [`project_feasible`] at `action`.
pub fn project_feasible_backward(action: &[f64], total_power: f64, dout: &[f64]) -> Vec<f64> {
    let q: Vec<f64> = action.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    let sum: f64 = q.iter().sum();
    let mut dq: Vec<f64> = if sum > total_power {
        let inner: f64 = dout.iter().zip(&q).map(|(d, v)| d * v).sum::<f64>() / sum;
        dout.iter().map(|d| total_power / sum * (d - inner)).collect()
    } else {
        dout.to_vec()
    };
    for (g, &x) in dq.iter_mut().zip(action) {
        if !(x > 0.0) {
            *g = 0.0;
        }
    }
    dq
}

/// `y = r + γ·max_k [λ·min(Q1_k, Q2_k) + (1 − λ)·max(Q1_k, Q2_k)]` over the
/// candidates' twin target values.
pub fn bcq_target_value(reward: f64, twins: &[(f64, f64)], gamma: f64, lambda: f64) -> f64 {
    let best = twins
        .iter()
        .map(|&(a, b)| lambda * a.min(b) + (1.0 - lambda) * a.max(b))
        .fold(f64::NEG_INFINITY, f64::max);
    if gamma == 0.0 {
        return reward;
    }
    reward + gamma * best
}

/// Index of the first maximal score.
pub fn select_argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Affine maps between raw data and network units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub state_mean: f64,
    pub state_std: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    /// Upper end of the decoder's action range.
    pub u_max: f64,
}

/// Budget-relative version of a generated action: negatives dropped and the
/// rest rescaled to sum to `M`. An all-zero action becomes uniform.
pub fn full_budget_units(action: &[f64]) -> Vec<f64> {
    let m = action.len() as f64;
    let pos: Vec<f64> = action.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    let sum: f64 = pos.iter().sum();
    if sum > 0.0 {
        pos.iter().map(|x| x * m / sum).collect()
    } else {
        vec![1.0; action.len()]
    }
}

fn moments(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, if var > 0.0 { var.sqrt() } else { 1.0 })
}

impl Scaling {
    pub fn fit(data: &[Trajectory]) -> Self {
        let (state_mean, state_std) = moments(data.iter().flat_map(|t| t.s.iter().chain(&t.s_next).copied()));
        let (reward_mean, reward_std) = moments(data.iter().map(|t| t.total_reward()));
        let u_max = data.iter().flat_map(|t| full_budget_units(&t.a)).fold(1.0, f64::max);
        Self {
            state_mean,
            state_std,
            reward_mean,
            reward_std,
            u_max,
        }
    }

    pub fn state(&self, gains: &[f64]) -> Vec<f64> {
        gains.iter().map(|g| (g - self.state_mean) / self.state_std).collect()
    }

    pub fn reward(&self, r: f64) -> f64 {
        (r - self.reward_mean) / self.reward_std
    }
}

/// Transitions in network units.
#[derive(Debug, Clone, PartialEq)]
pub struct BcqBatch {
    pub s: Tensor2,
    pub u: Tensor2,
    pub r: Vec<f64>,
    pub s_next: Tensor2,
}

impl BcqBatch {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    fn with_width(m: usize) -> Self {
        Self {
            s: Tensor2::zeros(0, m),
            u: Tensor2::zeros(0, m),
            r: Vec::new(),
            s_next: Tensor2::zeros(0, m),
        }
    }

    fn push(&mut self, s: &[f64], u: &[f64], r: f64, s_next: &[f64]) {
        for (t, v) in [(&mut self.s, s), (&mut self.u, u), (&mut self.s_next, s_next)] {
            t.data.extend_from_slice(v);
            t.rows += 1;
        }
        self.r.push(r);
    }

    /// Generated transitions with actions rescaled to the full budget.
    pub fn from_generated(data: &[Trajectory], scaling: &Scaling) -> Result<Self> {
        let m = data.first().map_or(0, |t| t.s.len());
        let mut out = Self::with_width(m);
        for t in data {
            if t.s.len() != m || t.a.len() != m || t.s_next.len() != m {
                return Err(Error::Config("generated transitions differ in channel count".into()));
            }
            out.push(
                &scaling.state(&t.s),
                &full_budget_units(&t.a),
                scaling.reward(t.total_reward()),
                &scaling.state(&t.s_next),
            );
        }
        Ok(out)
    }

    pub fn gather(&self, idx: &[usize]) -> Self {
        let mut out = Self::with_width(self.s.cols);
        for &i in idx {
            out.push(self.s.row(i), self.u.row(i), self.r[i], self.s_next.row(i));
        }
        out
    }

    pub fn concat(mut self, other: &Self) -> Self {
        for i in 0..other.len() {
            self.push(other.s.row(i), other.u.row(i), other.r[i], other.s_next.row(i));
        }
        self
    }
}

/// Losses reported by one training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcqDiagnostics {
    pub q_loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
    /// Mean Q1 of the perturbed actions the policy would take.
    pub perturb_objective: f64,
}

/// Weight of the per-dimension KL term in the VAE loss.
pub const KL_WEIGHT: f64 = 0.5;

/// Every network, optimiser and scaling constant of one BCQ agent.
#[derive(Debug, Clone)]
pub struct BcqLearner {
    pub config: BcqConfig,
    pub scaling: Scaling,
    pub vae: VaePolicy,
    pub perturb: PerturbNet,
    pub perturb_target: PerturbNet,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    opt_vae: AdamState,
    opt_perturb: AdamState,
    opt_q1: AdamState,
    opt_q2: AdamState,
    pub iteration: usize,
}

/// Names of the networks in a policy file.
pub const POLICY_NETWORKS: [&str; 7] = ["vae", "perturb", "perturb_target", "q1", "q2", "q1_target", "q2_target"];

fn clipped_latents<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor2 {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z.clamp(-0.5, 0.5)
        })
        .collect();
    Tensor2 { rows, cols, data }
}

fn repeat_rows(t: &Tensor2, times: usize) -> Tensor2 {
    let mut out = Tensor2::zeros(t.rows * times, t.cols);
    for r in 0..t.rows {
        for k in 0..times {
            out.row_mut(r * times + k).copy_from_slice(t.row(r));
        }
    }
    out
}

fn project_rows(t: &Tensor2, budget: f64) -> Tensor2 {
    let mut out = t.clone();
    for r in 0..t.rows {
        let p = project_feasible(t.row(r), budget);
        out.row_mut(r).copy_from_slice(&p);
    }
    out
}

impl BcqLearner {
    pub fn new<R: Rng + ?Sized>(config: BcqConfig, dim: usize, scaling: Scaling, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let latent = config.latent_dim.unwrap_or(2 * dim);
        let vae = VaePolicy::new(dim, latent, config.hidden, scaling.u_max, rng)?;
        let perturb = PerturbNet::new(dim, config.hidden, config.phi, rng)?;
        let q1 = q_network(dim, config.hidden, rng)?;
        let q2 = q_network(dim, config.hidden, rng)?;
        Ok(Self {
            opt_vae: AdamState::new(config.actor_lr),
            opt_perturb: AdamState::new(config.actor_lr),
            opt_q1: AdamState::new(config.critic_lr),
            opt_q2: AdamState::new(config.critic_lr),
            perturb_target: perturb.clone(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            config,
            scaling,
            vae,
            perturb,
            q1,
            q2,
            iteration: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.perturb.net.output_dim()
    }

    fn budget_units(&self) -> f64 {
        self.dim() as f64
    }

    fn diverged(&self, what: &str, value: f64) -> Error {
        Error::Divergence {
            step: self.iteration,
            detail: format!("{what} is {value}"),
        }
    }

    /// Target values for a batch: perturbed decoder candidates at the next
    /// states, scored by both target critics.
    pub fn targets<R: Rng + ?Sized>(&self, batch: &BcqBatch, rng: &mut R) -> Result<Vec<f64>> {
        let n = self.config.candidates;
        let s_rep = repeat_rows(&batch.s_next, n);
        let z = clipped_latents(s_rep.rows, self.vae.latent_dim(), rng);
        let u = self.vae.decode(&s_rep, &z)?;
        let (moved, _) = self.perturb_target.apply(&s_rep, &u)?;
        let w = project_rows(&moved, self.budget_units());
        let input = state_action(&s_rep, &w);
        let t1 = self.q1_target.forward(&input)?;
        let t2 = self.q2_target.forward(&input)?;
        Ok((0..batch.len())
            .map(|i| {
                let twins: Vec<(f64, f64)> = (0..n).map(|k| (t1.data[i * n + k], t2.data[i * n + k])).collect();
                bcq_target_value(batch.r[i], &twins, self.config.gamma, self.config.lambda)
            })
            .collect())
    }

    /// One iteration: VAE step, critic step towards the clipped double-Q
    /// target, perturbation step through Q1, then soft target updates.
    pub fn train_iter<R: Rng + ?Sized>(&mut self, batch: &BcqBatch, rng: &mut R) -> Result<BcqDiagnostics> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Config("empty training batch".into()));
        }
        let latent = self.vae.latent_dim();

        let noise = {
            let data = (0..b * latent).map(|_| StandardNormal.sample(rng)).collect();
            Tensor2::from_vec(b, latent, data)?
        };
        self.vae.zero_grad();
        let vae_losses = self
            .vae
            .accumulate(&batch.s, &batch.u, &noise, KL_WEIGHT)
            .map_err(|e| self.numerical(e))?;
        if !(vae_losses.reconstruction.is_finite() && vae_losses.kl.is_finite()) {
            return Err(self.diverged("vae loss", vae_losses.reconstruction + vae_losses.kl));
        }
        self.opt_vae.step(&mut self.vae)?;

        let y = self.targets(batch, rng).map_err(|e| self.numerical(e))?;
        let input = state_action(&batch.s, &batch.u);
        let mut q_loss = 0.0;
        for (q, opt) in [(&mut self.q1, &mut self.opt_q1), (&mut self.q2, &mut self.opt_q2)] {
            let cache = q.forward_cached(&input)?;
            let pred = cache.output();
            let mut grad = Tensor2::zeros(b, 1);
            let mut loss = 0.0;
            for i in 0..b {
                let d = pred.data[i] - y[i];
                loss += d * d;
                grad.data[i] = 2.0 * d / b as f64;
            }
            q_loss += loss / b as f64 / 2.0;
            q.zero_grad();
            q.backward(&cache, &grad);
            opt.step(q)?;
        }
        if !q_loss.is_finite() {
            return Err(self.diverged("critic loss", q_loss));
        }

        let z = clipped_latents(b, latent, rng);
        let u = self.vae.decode(&batch.s, &z)?;
        let (moved, pcache) = self.perturb.apply(&batch.s, &u).map_err(|e| self.numerical(e))?;
        let w = project_rows(&moved, self.budget_units());
        let qcache = self.q1.forward_cached(&state_action(&batch.s, &w))?;
        let objective = qcache.output().sum() / b as f64;
        if !objective.is_finite() {
            return Err(self.diverged("perturbation objective", objective));
        }
        let dq = Tensor2 {
            rows: b,
            cols: 1,
            data: vec![-1.0 / b as f64; b],
        };
        let dinput = self.q1.input_grad(&qcache, &dq);
        let m = self.dim();
        let mut dmoved = Tensor2::zeros(b, m);
        for r in 0..b {
            let dw = &dinput.row(r)[m..];
            let d = project_feasible_backward(moved.row(r), self.budget_units(), dw);
            dmoved.row_mut(r).copy_from_slice(&d);
        }
        self.perturb.zero_grad();
        self.perturb.backward(&pcache, &dmoved);
        self.opt_perturb.step(&mut self.perturb)?;

        let tau = self.config.soft_update;
        soft_update(&mut self.q1_target, &self.q1, tau)?;
        soft_update(&mut self.q2_target, &self.q2, tau)?;
        soft_update(&mut self.perturb_target, &self.perturb, tau)?;
        self.iteration += 1;
        Ok(BcqDiagnostics {
            q_loss,
            reconstruction: vae_losses.reconstruction,
            kl: vae_losses.kl,
            perturb_objective: objective,
        })
    }

    fn numerical(&self, e: Error) -> Error {
        match e {
            Error::Numerical(detail) => Error::Divergence {
                step: self.iteration,
                detail,
            },
            other => other,
        }
    }

    /// `n` perturbed decoder samples per state row, in budget-relative units
    /// and projected, with their Q1 scores.
    fn scored_candidates<R: Rng + ?Sized>(&self, s: &Tensor2, n: usize, rng: &mut R) -> Result<(Tensor2, Vec<f64>)> {
        let s_rep = repeat_rows(s, n);
        let z = clipped_latents(s_rep.rows, self.vae.latent_dim(), rng);
        let u = self.vae.decode(&s_rep, &z)?;
        let (moved, _) = self.perturb.apply(&s_rep, &u)?;
        let w = project_rows(&moved, self.budget_units());
        let scores = self.q1.forward(&state_action(&s_rep, &w))?.data;
        Ok((w, scores))
    }

    fn to_power(&self, w: &[f64], total_power: f64) -> Vec<f64> {
        let scale = total_power / self.budget_units();
        let raw: Vec<f64> = w.iter().map(|x| x * scale).collect();
        project_feasible(&raw, total_power)
    }

    /// `n` feasible candidate allocations for raw channel gains.
    pub fn candidate_actions<R: Rng + ?Sized>(
        &self,
        gains: &[f64],
        n: usize,
        total_power: f64,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        let s = Tensor2::row_vector(&self.scaling.state(gains));
        let (w, _) = self.scored_candidates(&s, n.max(1), rng)?;
        Ok((0..w.rows).map(|r| self.to_power(w.row(r), total_power)).collect())
    }

    /// The highest-Q1 candidate for raw channel gains.
    pub fn policy_act<R: Rng + ?Sized>(
        &self,
        gains: &[f64],
        n: usize,
        total_power: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let s = Tensor2::row_vector(&self.scaling.state(gains));
        let (w, scores) = self.scored_candidates(&s, n.max(1), rng)?;
        let best = select_argmax(&scores);
        Ok(self.to_power(w.row(best), total_power))
    }

    pub fn save(&self, path: &Path, meta: CheckpointMeta) -> Result<String> {
        let mut ck = Checkpoint::new(CheckpointMeta {
            step_count: self.iteration as u64,
            ..meta
        });
        ck.add("vae", &self.vae);
        ck.add("perturb", &self.perturb);
        ck.add("perturb_target", &self.perturb_target);
        ck.add("q1", &self.q1);
        ck.add("q2", &self.q2);
        ck.add("q1_target", &self.q1_target);
        ck.add("q2_target", &self.q2_target);
        let file = PolicyFile {
            format_version: POLICY_VERSION,
            networks: POLICY_NETWORKS.iter().map(|s| s.to_string()).collect(),
            dim: self.dim(),
            config: self.config.clone(),
            scaling: self.scaling.clone(),
            checkpoint: ck,
        };
        io::write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: PolicyFile = io::read_json(path)?;
        io::check_version(path, file.format_version, POLICY_VERSION)?;
        let mut rng = par::stream_rng(0, 0);
        let mut learner = Self::new(file.config, file.dim, file.scaling, &mut rng)?;
        let ck = &file.checkpoint;
        ck.restore("vae", &mut learner.vae)?;
        ck.restore("perturb", &mut learner.perturb)?;
        ck.restore("perturb_target", &mut learner.perturb_target)?;
        ck.restore("q1", &mut learner.q1)?;
        ck.restore("q2", &mut learner.q2)?;
        ck.restore("q1_target", &mut learner.q1_target)?;
        ck.restore("q2_target", &mut learner.q2_target)?;
        learner.iteration = ck.meta.step_count as usize;
        Ok(learner)
    }
}

pub const POLICY_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyFile {
    format_version: u32,
    networks: Vec<String>,
    dim: usize,
    config: BcqConfig,
    scaling: Scaling,
    checkpoint: Checkpoint,
}

/// Trains a fresh learner on generated transitions for `config.iterations`
/// iterations of uniformly sampled minibatches. Network initialisation and
/// training draw from separate streams of `seed`.
pub fn train_bcq(data: &[Trajectory], config: &BcqConfig, seed: u64) -> Result<(BcqLearner, Vec<BcqDiagnostics>)> {
    config.validate()?;
    if data.len() < config.batch_size {
        return Err(Error::Config(format!(
            "{} generated transitions, fewer than one batch of {}",
            data.len(),
            config.batch_size
        )));
    }
    let scaling = Scaling::fit(data);
    let all = BcqBatch::from_generated(data, &scaling)?;
    let mut init = par::stream_rng(seed, 0);
    let mut learner = BcqLearner::new(config.clone(), all.s.cols, scaling, &mut init)?;
    let mut rng = par::stream_rng(seed, 1);
    let mut history = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..all.len())).collect();
        history.push(learner.train_iter(&all.gather(&idx), &mut rng)?);
    }
    Ok((learner, history))
}

/// Online fine-tuning: the policy acts in the live environment, each real
/// transition joins a buffer, and every step runs one training iteration on a
/// batch drawn half from the generated data and half from the buffer.
/// Returns the spectral efficiency obtained at each step.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    learner: &mut BcqLearner,
    generated: &[Trajectory],
    spec: &IntentSpec,
    env: &EnvConfig,
    total_power: f64,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Ok(Vec::new());
    }
    let gen = BcqBatch::from_generated(generated, &learner.scaling)?;
    if gen.is_empty() {
        return Err(Error::Config("fine-tuning needs generated transitions".into()));
    }
    let mut env_rng = par::stream_rng(seed, 0);
    let mut act_rng = par::stream_rng(seed, 1);
    let mut rng = par::stream_rng(seed, 2);
    let m = learner.dim();
    let mut real = BcqBatch::with_width(m);
    let mut series = Vec::with_capacity(steps);
    let mut state = sample_gains(spec, env, &mut env_rng);
    let half = (learner.config.batch_size / 2).max(1);
    for _ in 0..steps {
        let action = learner.policy_act(&state.gains, learner.config.candidates, total_power, &mut act_rng)?;
        let (rewards, next) = env_step(&state, &action, spec, env, total_power, &mut env_rng)?;
        let se: f64 = rewards.iter().sum();
        series.push(se);
        let u: Vec<f64> = action.iter().map(|p| p * m as f64 / total_power).collect();
        real.push(
            &learner.scaling.state(&state.gains),
            &u,
            learner.scaling.reward(se),
            &learner.scaling.state(&next.gains),
        );
        let gi: Vec<usize> = (0..half).map(|_| rng.random_range(0..gen.len())).collect();
        let ri: Vec<usize> = (0..half).map(|_| rng.random_range(0..real.len())).collect();
        let batch = gen.gather(&gi).concat(&real.gather(&ri));
        learner.train_iter(&batch, &mut rng)?;
        state = next;
    }
    Ok(series)
}

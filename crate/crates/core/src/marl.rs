//! NVR-MAPPO trainer.
//!
//! One actor network is shared by every agent and acts on local observations
//! only. The centralized critic scores agent `l` from the global state, the
//! agent's own observation and a fixed Gaussian vector currently assigned to
//! that agent; the assignment is permuted across agents between updates.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, SimEnv};
use crate::error::{Result, SimError};
use crate::neural::{
    adam_step, clip_grad_norm, gaussian_entropy, gaussian_entropy_scalar, gaussian_log_prob,
    gaussian_log_prob_scalar, ActorNet, ActorSpec, AdamState, Checkpoint, CriticNet, CriticSpec, Tape, Tensor, Var,
};
use crate::seed::{self, tag, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    /// Training episodes `N̂`.
    pub episodes: usize,
    /// Trajectories collected per episode (batch size `B`), each on its own channel draw.
    pub batch_size: usize,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    /// Scale `α` applied to the critic's noise vectors; 0 disables them.
    pub noise_alpha: f64,
    pub noise_dim: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatches: usize,
    /// Length of the recurrent training chunks.
    pub chunk_len: usize,
    /// Permute the noise assignment every this many updates; 0 never shuffles.
    pub shuffle_interval: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub actor_hidden: usize,
    pub critic_hidden: usize,
    pub recurrent: bool,
    pub init_log_std: f64,
    /// Global gradient-norm cap per network; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Rewards are multiplied by this before advantage estimation.
    pub reward_scale: f64,
    /// Held-out channels used for the periodic evaluation.
    pub eval_channels: usize,
    /// Evaluate every this many episodes (and always after the last one).
    pub eval_interval: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            episodes: 200,
            batch_size: 4,
            clip_eps: 0.2,
            entropy_coef: 0.01,
            noise_alpha: 0.5,
            noise_dim: 8,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs: 5,
            minibatches: 1,
            chunk_len: 10,
            shuffle_interval: 1,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            actor_hidden: 64,
            critic_hidden: 128,
            recurrent: true,
            init_log_std: -0.5,
            max_grad_norm: 10.0,
            reward_scale: 1.0,
            eval_channels: 16,
            eval_interval: 10,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SimError::InvalidConfig(msg));
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(SimError::InvalidConfig(format!("marl.{name} must be positive and finite, got {v}")))
            }
        };
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("marl.clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if !(self.entropy_coef.is_finite() && self.entropy_coef >= 0.0) {
            return bad(format!("marl.entropy_coef must be >= 0, got {}", self.entropy_coef));
        }
        if !(self.noise_alpha.is_finite() && self.noise_alpha >= 0.0) {
            return bad(format!("marl.noise_alpha must be >= 0, got {}", self.noise_alpha));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("marl.gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("marl.gae_lambda must lie in [0, 1], got {}", self.gae_lambda));
        }
        for (name, v) in [
            ("episodes", self.episodes),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("minibatches", self.minibatches),
            ("chunk_len", self.chunk_len),
            ("actor_hidden", self.actor_hidden),
            ("critic_hidden", self.critic_hidden),
            ("eval_interval", self.eval_interval),
        ] {
            if v == 0 {
                return bad(format!("marl.{name} must be at least 1"));
            }
        }
        positive("actor_lr", self.actor_lr)?;
        positive("critic_lr", self.critic_lr)?;
        positive("reward_scale", self.reward_scale)?;
        if !self.init_log_std.is_finite() {
            return bad(format!("marl.init_log_std must be finite, got {}", self.init_log_std));
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm >= 0.0) {
            return bad(format!("marl.max_grad_norm must be >= 0, got {}", self.max_grad_norm));
        }
        Ok(())
    }

    /// `mappo` when both the noise and the recurrent cell are off.
    pub fn method_label(&self) -> &'static str {
        if self.noise_alpha == 0.0 && !self.recurrent {
            "mappo"
        } else {
            "nvr_mappo"
        }
    }
}

/// Per-agent Gaussian vectors drawn once. The vectors never change; shuffling
/// permutes which agent each vector is assigned to.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBank {
    vectors: Vec<Vec<f64>>,
    assignment: Vec<usize>,
    history: Vec<Vec<usize>>,
}

impl NoiseBank {
    pub fn sample<R: Rng + ?Sized>(agents: usize, dim: usize, rng: &mut R) -> Self {
        let vectors = (0..agents).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect();
        Self { vectors, assignment: (0..agents).collect(), history: Vec::new() }
    }

    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
            return Err(SimError::shape("noise vectors", dim, v.len()));
        }
        let n = vectors.len();
        Ok(Self { vectors, assignment: (0..n).collect(), history: Vec::new() })
    }

    pub fn agents(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Index of the vector currently assigned to agent `l`.
    pub fn row(&self, l: usize) -> usize {
        self.assignment[l]
    }

    pub fn vector(&self, row: usize) -> &[f64] {
        &self.vectors[row]
    }

    pub fn agent_vector(&self, l: usize) -> &[f64] {
        &self.vectors[self.assignment[l]]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Past assignments, oldest first.
    pub fn history(&self) -> &[Vec<usize>] {
        &self.history
    }

    pub fn shuffle<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.history.push(self.assignment.clone());
        self.assignment.shuffle(rng);
    }
}

pub fn shuffle_noise(bank: &NoiseBank, seed: u64) -> NoiseBank {
    let mut out = bank.clone();
    out.shuffle(&mut seed::rng(seed, tag::SHUFFLE, 0));
    out
}

/// Critic input: state features followed by `α·x`.
pub fn noisy_value_input(state: &[f64], x: &[f64], alpha: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(state.len() + x.len());
    v.extend_from_slice(state);
    v.extend(x.iter().map(|xi| alpha * xi));
    v
}

/// Generalized advantage estimation over one trajectory. `bootstrap` is the
/// value after the last step; a `done` step cuts the recursion.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(SimError::shape("gae inputs", n, format!("values {} / dones {}", values.len(), dones.len())));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// `exp(logp_new − logp_old)`, or `None` when that is not finite.
pub fn ppo_ratio(logp_new: f64, logp_old: f64) -> Option<f64> {
    let r = (logp_new - logp_old).exp();
    r.is_finite().then_some(r)
}

pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// `−mean(min(r·Â, clip(r)·Â)) − η·ℋ`.
pub fn actor_loss(ratios: &[f64], adv: &[f64], eps: f64, entropy: f64, eta: f64) -> f64 {
    let n = ratios.len().max(1) as f64;
    let surr: f64 = ratios.iter().zip(adv).map(|(&r, &a)| clipped_surrogate(r, a, eps)).sum();
    -surr / n - eta * entropy
}

/// Mean squared error between values and return targets.
pub fn critic_loss(values: &[f64], returns: &[f64]) -> f64 {
    let n = values.len().max(1) as f64;
    values.iter().zip(returns).map(|(v, r)| (v - r) * (v - r)).sum::<f64>() / n
}

pub struct ActorLossTerms {
    pub loss: Var,
    pub kept: usize,
    pub dropped: usize,
    pub clip_fraction: f64,
}

/// Tape form of [`actor_loss`]. `logp_new` is `[n, 1]`; samples whose ratio
/// overflows are removed before the surrogate and reported as dropped.
pub fn actor_loss_tape(
    tape: &mut Tape,
    logp_new: Var,
    logp_old: &[f64],
    adv: &[f64],
    entropy: Var,
    eps: f64,
    eta: f64,
) -> ActorLossTerms {
    let old = tape.constant(Tensor::column(logp_old.to_vec()));
    let diff = tape.sub(logp_new, old);
    let keep: Vec<usize> = tape
        .value(diff)
        .data()
        .iter()
        .enumerate()
        .filter(|(_, d)| d.exp().is_finite())
        .map(|(i, _)| i)
        .collect();
    let dropped = logp_old.len() - keep.len();
    let ent_term = tape.scale(entropy, -eta);
    if keep.is_empty() {
        return ActorLossTerms { loss: ent_term, kept: 0, dropped, clip_fraction: 0.0 };
    }
    let diff = tape.gather_rows(diff, &keep);
    let ratio = tape.exp(diff);
    let a = tape.constant(Tensor::column(keep.iter().map(|&i| adv[i]).collect()));
    let s1 = tape.mul(ratio, a);
    let rc = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let s2 = tape.mul(rc, a);
    let surr = tape.minimum(s1, s2);
    let mean = tape.mean_all(surr);
    let neg = tape.scale(mean, -1.0);
    let loss = tape.add(neg, ent_term);
    let clipped = tape.value(ratio).data().iter().filter(|r| (*r - 1.0).abs() > eps).count();
    ActorLossTerms { loss, kept: keep.len(), dropped, clip_fraction: clipped as f64 / keep.len() as f64 }
}

/// Tape form of [`critic_loss`] for `[n, 1]` values.
pub fn critic_loss_tape(tape: &mut Tape, values: Var, returns: &[f64]) -> Var {
    let target = tape.constant(Tensor::column(returns.to_vec()));
    let err = tape.sub(values, target);
    let sq = tape.square(err);
    tape.mean_all(sq)
}

/// One collected trajectory; inner indices are `[t][l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub obs: Vec<Vec<Vec<f64>>>,
    /// Critic features without the noise block.
    pub states: Vec<Vec<Vec<f64>>>,
    pub actions: Vec<Vec<Vec<f64>>>,
    pub log_probs: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    /// Recurrent state before acting at `t`.
    pub hidden: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub noise_rows: Vec<Vec<usize>>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn check(&self, agents: usize) -> Result<()> {
        let t = self.len();
        let per_step = [
            ("observations", self.obs.len(), self.obs.iter().all(|s| s.len() == agents)),
            ("states", self.states.len(), self.states.iter().all(|s| s.len() == agents)),
            ("actions", self.actions.len(), self.actions.iter().all(|s| s.len() == agents)),
            ("log-probs", self.log_probs.len(), self.log_probs.iter().all(|s| s.len() == agents)),
            ("values", self.values.len(), self.values.iter().all(|s| s.len() == agents)),
            ("hidden states", self.hidden.len(), self.hidden.iter().all(|s| s.len() == agents)),
            ("noise rows", self.noise_rows.len(), self.noise_rows.iter().all(|s| s.len() == agents)),
            ("done flags", self.dones.len(), true),
        ];
        for (name, len, agents_ok) in per_step {
            if len != t || !agents_ok {
                return Err(SimError::ShapeMismatch {
                    context: "rollout",
                    expected: format!("{t} steps of {agents} agents"),
                    found: format!("{name}: {len} steps"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    capacity: usize,
    agents: usize,
    rollouts: Vec<Rollout>,
}

impl RolloutBuffer {
    pub fn new(capacity: usize, agents: usize) -> Self {
        Self { capacity, agents, rollouts: Vec::with_capacity(capacity) }
    }

    pub fn push(&mut self, r: Rollout) -> Result<()> {
        if self.rollouts.len() >= self.capacity {
            return Err(SimError::shape("rollout buffer", self.capacity, self.rollouts.len() + 1));
        }
        r.check(self.agents)?;
        self.rollouts.push(r);
        Ok(())
    }

    pub fn rollouts(&self) -> &[Rollout] {
        &self.rollouts
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.rollouts.len() == self.capacity
    }

    pub fn clear(&mut self) {
        self.rollouts.clear();
    }
}

/// Builds the critic input for every `(t, l)` of a rollout from the noise
/// rows recorded at collection time.
pub fn critic_inputs(r: &Rollout, bank: &NoiseBank, alpha: f64) -> Vec<Vec<f64>> {
    let mut rows = Vec::with_capacity(r.len() * bank.agents());
    for (states, noise) in r.states.iter().zip(&r.noise_rows) {
        for (s, &row) in states.iter().zip(noise) {
            rows.push(noisy_value_input(s, bank.vector(row), alpha));
        }
    }
    rows
}

pub fn actor_spec(env: &EnvConfig, hp: &Hyperparams) -> ActorSpec {
    ActorSpec {
        obs_dim: env.obs_dim(),
        act_dim: env.action_dim(),
        hidden: hp.actor_hidden,
        recurrent: hp.recurrent,
        init_log_std: hp.init_log_std,
    }
}

pub fn critic_spec(env: &EnvConfig, hp: &Hyperparams) -> CriticSpec {
    CriticSpec { in_dim: env.agent_state_dim() + hp.noise_dim, hidden: hp.critic_hidden }
}

/// Runs one episode with stochastic actions and records everything the
/// update needs.
pub fn collect_rollout(
    env: &mut SimEnv,
    env_seed: u64,
    actor: &ActorNet,
    critic: &CriticNet,
    bank: &NoiseBank,
    alpha: f64,
    rng: &mut SimRng,
) -> Result<Rollout> {
    let agents = env.config().agents;
    let (mut state, mut obs) = env.reset(env_seed)?;
    let mut h = actor.initial_hidden(agents);
    let mut r = Rollout {
        obs: Vec::new(),
        states: Vec::new(),
        actions: Vec::new(),
        log_probs: Vec::new(),
        values: Vec::new(),
        hidden: Vec::new(),
        rewards: Vec::new(),
        dones: Vec::new(),
        noise_rows: Vec::new(),
    };
    loop {
        let states: Vec<Vec<f64>> = (0..agents).map(|l| env.agent_state(&state, l)).collect();
        let noise_rows: Vec<usize> = (0..agents).map(|l| bank.row(l)).collect();
        let inputs: Vec<Vec<f64>> =
            states.iter().zip(&noise_rows).map(|(s, &row)| noisy_value_input(s, bank.vector(row), alpha)).collect();
        let values = critic.value_forward(&Tensor::from_rows(&inputs)?)?;

        let (means, log_std, h_next) = actor.policy_forward(&[Tensor::from_rows(&obs)?], &h)?;
        let std: Vec<f64> = log_std.data().iter().map(|s| s.exp()).collect();
        let mut actions = Vec::with_capacity(agents);
        let mut log_probs = Vec::with_capacity(agents);
        for l in 0..agents {
            let mean = means[0].row_slice(l);
            let a: Vec<f64> =
                mean.iter().zip(&std).map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal)).collect();
            log_probs.push(gaussian_log_prob_scalar(&a, mean, log_std.data()));
            actions.push(a);
        }
        let step = env.step(&actions)?;

        r.hidden.push((0..agents).map(|l| h.row_slice(l).to_vec()).collect());
        r.obs.push(obs);
        r.states.push(states);
        r.actions.push(actions);
        r.log_probs.push(log_probs);
        r.values.push(values);
        r.rewards.push(step.shared_reward);
        r.dones.push(step.done);
        r.noise_rows.push(noise_rows);

        h = h_next;
        obs = step.next_obs;
        state = step.next_state;
        if step.done {
            break;
        }
    }
    Ok(r)
}

/// Executes the deterministic (mean) policy on each channel seed and returns
/// the sum SE averaged over the episode's steps, one entry per channel. Only
/// the actor is involved; no critic and no noise.
pub fn evaluate_policy(env: &mut SimEnv, actor: &ActorNet, channel_seeds: &[u64]) -> Result<Vec<f64>> {
    let agents = env.config().agents;
    let mut out = Vec::with_capacity(channel_seeds.len());
    for &s in channel_seeds {
        let (_, mut obs) = env.reset(s)?;
        let mut h = actor.initial_hidden(agents);
        let mut total = 0.0;
        let mut steps = 0usize;
        loop {
            let (means, _, h_next) = actor.policy_forward(&[Tensor::from_rows(&obs)?], &h)?;
            let actions: Vec<Vec<f64>> = (0..agents).map(|l| means[0].row_slice(l).to_vec()).collect();
            let step = env.step(&actions)?;
            total += step.shared_reward;
            steps += 1;
            h = h_next;
            obs = step.next_obs;
            if step.done {
                break;
            }
        }
        out.push(total / steps as f64);
    }
    Ok(out)
}

/// Held-out channel seeds shared by every method evaluated under `seed`.
pub fn eval_channel_seeds(seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| seed::derive(seed, tag::EVAL, i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub method: String,
    pub episode: usize,
    pub mean_reward: f64,
    pub sum_se_eval: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub ratio_clip_fraction: f64,
    pub dropped_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub dropped: usize,
    /// Ratios seen by the first minibatch of the first epoch.
    pub first_ratio_max_dev: f64,
}

struct Chunk {
    rollout: usize,
    agent: usize,
    start: usize,
    len: usize,
}

pub struct Learner {
    pub hp: Hyperparams,
    pub actor: ActorNet,
    pub critic: CriticNet,
    actor_opt: AdamState,
    critic_opt: AdamState,
}

impl Learner {
    pub fn new(env: &EnvConfig, hp: &Hyperparams, seed: u64) -> Result<Self> {
        hp.validate()?;
        let actor = ActorNet::new(actor_spec(env, hp), &mut seed::rng(seed, tag::INIT, 0));
        let critic = CriticNet::new(critic_spec(env, hp), &mut seed::rng(seed, tag::INIT, 1));
        let actor_opt = AdamState::for_params(&actor.params, hp.actor_lr);
        let critic_opt = AdamState::for_params(&critic.params, hp.critic_lr);
        Ok(Self { hp: hp.clone(), actor, critic, actor_opt, critic_opt })
    }

    /// Rolls the current policy over whole trajectories and returns the
    /// recurrent state before every step, `[rollout][agent][t]`.
    fn refresh_hidden(&self, rollouts: &[Rollout], agents: usize) -> Result<Vec<Vec<Vec<Vec<f64>>>>> {
        let mut out = Vec::with_capacity(rollouts.len());
        for r in rollouts {
            let mut h = self.actor.initial_hidden(agents);
            let mut per_agent = vec![Vec::with_capacity(r.len()); agents];
            for obs in &r.obs {
                for (l, slot) in per_agent.iter_mut().enumerate() {
                    slot.push(h.row_slice(l).to_vec());
                }
                let (_, _, next) = self.actor.policy_forward(&[Tensor::from_rows(obs)?], &h)?;
                h = next;
            }
            out.push(per_agent);
        }
        Ok(out)
    }

    /// Clipped policy and value updates on the buffered trajectories.
    pub fn update(&mut self, buffer: &RolloutBuffer, bank: &NoiseBank, rng: &mut SimRng) -> Result<UpdateStats> {
        let hp = self.hp.clone();
        let rollouts = buffer.rollouts();
        let agents = bank.agents();
        if rollouts.is_empty() {
            return Err(SimError::InvalidConfig("update called on an empty buffer".into()));
        }

        // advantages and returns per (rollout, t, agent)
        let mut adv = Vec::with_capacity(rollouts.len());
        let mut ret = Vec::with_capacity(rollouts.len());
        for r in rollouts {
            let rewards: Vec<f64> = r.rewards.iter().map(|x| x * hp.reward_scale).collect();
            let mut a_r = vec![vec![0.0; agents]; r.len()];
            let mut g_r = vec![vec![0.0; agents]; r.len()];
            for l in 0..agents {
                let v: Vec<f64> = r.values.iter().map(|row| row[l]).collect();
                let (a, g) = gae(&rewards, &v, &r.dones, 0.0, hp.gamma, hp.gae_lambda)?;
                for t in 0..r.len() {
                    a_r[t][l] = a[t];
                    g_r[t][l] = g[t];
                }
            }
            adv.push(a_r);
            ret.push(g_r);
        }
        let flat: Vec<f64> = adv.iter().flatten().flatten().copied().collect();
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        let std = (flat.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / flat.len() as f64).sqrt();
        for a in adv.iter_mut().flatten().flatten() {
            *a = (*a - mean) / (std + 1e-8);
        }

        let mut chunks = Vec::new();
        for (ri, r) in rollouts.iter().enumerate() {
            for l in 0..agents {
                let mut start = 0;
                while start < r.len() {
                    let len = hp.chunk_len.min(r.len() - start);
                    chunks.push(Chunk { rollout: ri, agent: l, start, len });
                    start += len;
                }
            }
        }

        let mut stats = UpdateStats::default();
        let mut n_updates = 0usize;
        let mut order: Vec<usize> = (0..chunks.len()).collect();
        for epoch in 0..hp.epochs {
            let hidden = self.refresh_hidden(rollouts, agents)?;
            order.shuffle(rng);
            let per = chunks.len().div_ceil(hp.minibatches);
            for (mb_index, mb) in order.chunks(per.max(1)).enumerate() {
                let picked: Vec<&Chunk> = mb.iter().map(|&i| &chunks[i]).collect();
                let (a_loss, ent, clip, dropped, dev) = self.actor_step(&picked, rollouts, &hidden, &adv)?;
                let c_loss = self.critic_step(&picked, rollouts, bank, &ret)?;
                if !(a_loss.is_finite() && c_loss.is_finite()) {
                    return Err(SimError::Diverged(format!(
                        "epoch {epoch}, minibatch {mb_index}: actor loss {a_loss}, critic loss {c_loss}, \
                         actor params finite {}, critic params finite {}, log_std {:?}",
                        self.actor.params.is_finite(),
                        self.critic.params.is_finite(),
                        self.actor.log_std()
                    )));
                }
                if epoch == 0 && mb_index == 0 {
                    stats.first_ratio_max_dev = dev;
                }
                stats.actor_loss += a_loss;
                stats.critic_loss += c_loss;
                stats.entropy += ent;
                stats.clip_fraction += clip;
                stats.dropped += dropped;
                n_updates += 1;
            }
        }
        let n = n_updates as f64;
        stats.actor_loss /= n;
        stats.critic_loss /= n;
        stats.entropy /= n;
        stats.clip_fraction /= n;
        Ok(stats)
    }

    /// Returns (loss, entropy, clip fraction, dropped, max |ratio − 1|).
    fn actor_step(
        &mut self,
        picked: &[&Chunk],
        rollouts: &[Rollout],
        hidden: &[Vec<Vec<Vec<f64>>>],
        adv: &[Vec<Vec<f64>>],
    ) -> Result<(f64, f64, f64, usize, f64)> {
        let mut groups: BTreeMap<usize, Vec<&Chunk>> = BTreeMap::new();
        for c in picked {
            groups.entry(c.len).or_default().push(c);
        }
        let mut tape = Tape::new();
        let vars = self.actor.params.bind(&mut tape, true);
        let mut lps = Vec::new();
        let mut old = Vec::new();
        let mut advs = Vec::new();
        let mut log_std = None;
        for (len, cs) in &groups {
            let h0 = Tensor::from_rows(
                &cs.iter().map(|c| hidden[c.rollout][c.agent][c.start].clone()).collect::<Vec<_>>(),
            )?;
            let h0 = tape.constant(h0);
            let mut xs = Vec::with_capacity(*len);
            for tau in 0..*len {
                let rows: Vec<Vec<f64>> =
                    cs.iter().map(|c| rollouts[c.rollout].obs[c.start + tau][c.agent].clone()).collect();
                xs.push(tape.constant(Tensor::from_rows(&rows)?));
            }
            let out = self.actor.forward_tape(&mut tape, &vars, &xs, h0);
            for (tau, &mean) in out.means.iter().enumerate() {
                let rows: Vec<Vec<f64>> =
                    cs.iter().map(|c| rollouts[c.rollout].actions[c.start + tau][c.agent].clone()).collect();
                let acts = tape.constant(Tensor::from_rows(&rows)?);
                lps.push(gaussian_log_prob(&mut tape, acts, mean, out.log_std));
                for c in cs {
                    old.push(rollouts[c.rollout].log_probs[c.start + tau][c.agent]);
                    advs.push(adv[c.rollout][c.start + tau][c.agent]);
                }
            }
            log_std = Some(out.log_std);
        }
        let log_std = log_std.expect("minibatch holds at least one chunk");
        let lp = tape.concat_rows(&lps);
        let entropy = gaussian_entropy(&mut tape, log_std);
        let dev = tape
            .value(lp)
            .data()
            .iter()
            .zip(&old)
            .filter_map(|(n, o)| ppo_ratio(*n, *o))
            .map(|r| (r - 1.0).abs())
            .fold(0.0, f64::max);
        let terms = actor_loss_tape(&mut tape, lp, &old, &advs, entropy, self.hp.clip_eps, self.hp.entropy_coef);
        let loss = tape.value(terms.loss).item();
        let ent = tape.value(entropy).item();
        if loss.is_finite() {
            let grads = tape.backward(terms.loss)?;
            let mut g = self.actor.params.flat_grad(&grads, &vars);
            clip_grad_norm(&mut g, self.hp.max_grad_norm);
            adam_step(&mut self.actor.params, &g, &mut self.actor_opt)?;
        }
        Ok((loss, ent, terms.clip_fraction, terms.dropped, dev))
    }

    fn critic_step(
        &mut self,
        picked: &[&Chunk],
        rollouts: &[Rollout],
        bank: &NoiseBank,
        ret: &[Vec<Vec<f64>>],
    ) -> Result<f64> {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for c in picked {
            let r = &rollouts[c.rollout];
            for t in c.start..c.start + c.len {
                let row = r.noise_rows[t][c.agent];
                rows.push(noisy_value_input(&r.states[t][c.agent], bank.vector(row), self.hp.noise_alpha));
                targets.push(ret[c.rollout][t][c.agent]);
            }
        }
        let mut tape = Tape::new();
        let vars = self.critic.params.bind(&mut tape, true);
        let x = tape.constant(Tensor::from_rows(&rows)?);
        let v = self.critic.forward_tape(&mut tape, &vars, x);
        let loss = critic_loss_tape(&mut tape, v, &targets);
        let value = tape.value(loss).item();
        if value.is_finite() {
            let grads = tape.backward(loss)?;
            let mut g = self.critic.params.flat_grad(&grads, &vars);
            clip_grad_norm(&mut g, self.hp.max_grad_norm);
            adam_step(&mut self.critic.params, &g, &mut self.critic_opt)?;
        }
        Ok(value)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub actor: ActorNet,
    pub critic: CriticNet,
    pub noise: NoiseBank,
    pub metrics: Vec<EpisodeMetrics>,
    /// Per-channel sum SE of the final policy on the held-out set.
    pub final_eval: Vec<f64>,
}

impl TrainOutput {
    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        let mut ck = Checkpoint::default();
        let a = &self.actor.spec;
        let c = &self.critic.spec;
        for (k, v) in [
            ("seed", seed.to_string()),
            ("obs_dim", a.obs_dim.to_string()),
            ("act_dim", a.act_dim.to_string()),
            ("actor_hidden", a.hidden.to_string()),
            ("recurrent", a.recurrent.to_string()),
            ("critic_in", c.in_dim.to_string()),
            ("critic_hidden", c.hidden.to_string()),
            ("noise_dim", self.noise.dim().to_string()),
            ("noise_assignment", format!("{:?}", self.noise.assignment()).replace(' ', "")),
        ] {
            ck.meta.insert(k.to_string(), v);
        }
        ck.push_params(&self.actor.params);
        ck.push_params(&self.critic.params);
        if self.noise.dim() > 0 {
            let rows: Vec<Vec<f64>> = (0..self.noise.agents()).map(|i| self.noise.vector(i).to_vec()).collect();
            if let Ok(t) = Tensor::from_rows(&rows) {
                ck.tensors.push(("noise.vectors".into(), t));
            }
        }
        ck
    }
}

/// Restores the actor from a checkpoint, checking it against the expected
/// observation and action sizes.
pub fn actor_from_checkpoint(ck: &Checkpoint, obs_dim: usize, act_dim: usize) -> Result<ActorNet> {
    let spec = ActorSpec {
        obs_dim: ck.meta_value("obs_dim")?,
        act_dim: ck.meta_value("act_dim")?,
        hidden: ck.meta_value("actor_hidden")?,
        recurrent: ck.meta_value("recurrent")?,
        init_log_std: 0.0,
    };
    if (spec.obs_dim, spec.act_dim) != (obs_dim, act_dim) {
        return Err(SimError::shape(
            "checkpoint actor",
            format!("obs {obs_dim}, act {act_dim}"),
            format!("obs {}, act {}", spec.obs_dim, spec.act_dim),
        ));
    }
    let mut actor = ActorNet::new(spec, &mut seed::rng(0, tag::INIT, 0));
    actor.params.load_from(&ck.params_with_prefix("actor."))?;
    Ok(actor)
}

/// Full training run: collect `batch_size` trajectories per episode, shuffle
/// the noise assignment at the configured interval, update, and evaluate
/// the mean policy on the held-out channels.
pub fn train(env_cfg: &EnvConfig, hp: &Hyperparams, seed: u64) -> Result<TrainOutput> {
    train_with(env_cfg, hp, seed, |_| {})
}

pub fn train_with(
    env_cfg: &EnvConfig,
    hp: &Hyperparams,
    seed: u64,
    mut on_episode: impl FnMut(&EpisodeMetrics),
) -> Result<TrainOutput> {
    let mut learner = Learner::new(env_cfg, hp, seed)?;
    let mut env = SimEnv::new(env_cfg.clone())?;
    let mut eval_env = SimEnv::new(env_cfg.clone())?;
    let eval_seeds = eval_channel_seeds(seed, hp.eval_channels);
    let mut bank = NoiseBank::sample(env_cfg.agents, hp.noise_dim, &mut seed::rng(seed, tag::NOISE, 0));
    let mut buffer = RolloutBuffer::new(hp.batch_size, env_cfg.agents);
    let mut metrics = Vec::with_capacity(hp.episodes);
    let mut last_eval = f64::NAN;
    let mut final_eval = Vec::new();

    for ep in 0..hp.episodes {
        let mut act_rng = seed::rng(seed, tag::ACTION, ep as u64);
        buffer.clear();
        let mut reward_sum = 0.0;
        let mut reward_n = 0usize;
        for b in 0..hp.batch_size {
            let env_seed = seed::derive(seed, tag::EPISODE, (ep * hp.batch_size + b) as u64);
            let r = collect_rollout(
                &mut env,
                env_seed,
                &learner.actor,
                &learner.critic,
                &bank,
                hp.noise_alpha,
                &mut act_rng,
            )?;
            reward_sum += r.rewards.iter().sum::<f64>();
            reward_n += r.len();
            buffer.push(r)?;
        }
        if hp.shuffle_interval > 0 && (ep + 1) % hp.shuffle_interval == 0 {
            bank.shuffle(&mut seed::rng(seed, tag::SHUFFLE, ep as u64));
        }
        let stats = learner.update(&buffer, &bank, &mut seed::rng(seed, tag::MINIBATCH, ep as u64))?;

        let last = ep + 1 == hp.episodes;
        if ep % hp.eval_interval == 0 || last {
            let per_channel = evaluate_policy(&mut eval_env, &learner.actor, &eval_seeds)?;
            last_eval = mean(&per_channel);
            if last {
                final_eval = per_channel;
            }
        }
        let m = EpisodeMetrics {
            method: hp.method_label().to_string(),
            episode: ep,
            mean_reward: reward_sum / reward_n as f64,
            sum_se_eval: last_eval,
            actor_loss: stats.actor_loss,
            critic_loss: stats.critic_loss,
            entropy: stats.entropy,
            ratio_clip_fraction: stats.clip_fraction,
            dropped_samples: stats.dropped,
        };
        log::debug!(
            "episode {ep}: reward {:.4}, eval {:.4}, actor {:.4}, critic {:.4}",
            m.mean_reward,
            m.sum_se_eval,
            m.actor_loss,
            m.critic_loss
        );
        on_episode(&m);
        metrics.push(m);
    }
    Ok(TrainOutput { actor: learner.actor, critic: learner.critic, noise: bank, metrics, final_eval })
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Entropy of the current policy's action distribution.
pub fn policy_entropy(actor: &ActorNet) -> f64 {
    gaussian_entropy_scalar(actor.log_std())
}

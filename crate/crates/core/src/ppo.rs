//! PPO with a clipped surrogate, separate actor and critic MLPs, GAE and a
//! tanh-squashed diagonal Gaussian policy.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{CommEnv, EnvAction, TrajectoryRow, ACTION_DIM};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp, Parameterized};
use crate::persist;

pub const CHECKPOINT_FORMAT: &str = "uavckm-ppo";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Per-dimension `(low, high)` of the squashed action.
pub const ACTION_RANGES: [(f64, f64); ACTION_DIM] = [(-1.0, 1.0), (0.0, 1.0), (-1.0, 1.0), (0.0, 1.0)];

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub lr: f64,
    pub clip: f64,
    pub rollout_len: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub max_episodes: usize,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    /// Initial log standard deviation per action dimension.
    pub log_std_init: [f64; ACTION_DIM],
    /// Bootstrap from the critic when an episode hits `T_max` instead of
    /// treating the time limit as a terminal state.
    pub bootstrap_timeouts: bool,
    /// Multiplier on rewards seen by the learner. Logged returns stay unscaled.
    pub reward_scale: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            lr: 1e-5,
            clip: 0.2,
            rollout_len: 2048,
            epochs: 10,
            minibatch: 256,
            max_episodes: 40_000,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            hidden: vec![256, 256],
            log_std_init: [0.0; ACTION_DIM],
            bootstrap_timeouts: true,
            reward_scale: 1.0,
            seed: 0,
        }
    }
}

impl PpoConfig {
    /// Reduced-scale profile tuned for 2000 episodes on the 3-user scene.
    pub fn desk() -> Self {
        PpoConfig {
            lr: 1e-3,
            rollout_len: 1024,
            max_episodes: 2000,
            reward_scale: 30.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must be in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must be in [0, 1]");
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return bad("reward_scale must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.rollout_len == 0 || self.epochs == 0 || self.minibatch == 0 {
            return bad("rollout_len, epochs and minibatch must be positive");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }
}

/// `log(1 - tanh(u)^2)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    let x = -2.0 * u;
    let softplus = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    2.0 * (std::f64::consts::LN_2 - u - softplus)
}

/// Maps pre-squash samples into the action box.
pub fn squash(u: &[f64]) -> [f64; ACTION_DIM] {
    let mut a = [0.0; ACTION_DIM];
    for (j, &(lo, hi)) in ACTION_RANGES.iter().enumerate() {
        a[j] = lo + (u[j].tanh() + 1.0) * 0.5 * (hi - lo);
    }
    a
}

/// Log-determinant of the squash Jacobian at `u`.
pub fn squash_log_det(u: &[f64]) -> f64 {
    ACTION_RANGES
        .iter()
        .zip(u)
        .map(|(&(lo, hi), &x)| log_one_minus_tanh_sq(x) + ((hi - lo) * 0.5).ln())
        .sum()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyNet {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
    #[serde(skip)]
    log_std_grad: Vec<f64>,
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        log_std_init: [f64; ACTION_DIM],
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(ACTION_DIM);
        PolicyNet {
            mean: Mlp::new(&sizes, Activation::Tanh, 0.01, rng),
            log_std: log_std_init.iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect(),
            log_std_grad: vec![0.0; ACTION_DIM],
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.mean.input_dim()
    }

    pub fn mean_of(&self, obs: &[f64]) -> Vec<f64> {
        self.mean.infer_one(obs)
    }

    /// Gaussian log-density of pre-squash `u` given the mean.
    fn gaussian_log_prob(&self, mean: &[f64], u: &[f64]) -> f64 {
        let mut lp = 0.0;
        for j in 0..ACTION_DIM {
            let ls = self.log_std[j];
            let z = (u[j] - mean[j]) / ls.exp();
            lp += -0.5 * z * z - ls - 0.5 * LN_2PI;
        }
        lp
    }

    /// Log-density of the squashed action produced by `u`.
    pub fn log_prob(&self, obs: &[f64], u: &[f64]) -> f64 {
        let mean = self.mean_of(obs);
        self.gaussian_log_prob(&mean, u) - squash_log_det(u)
    }

    /// Squashed mean, used for deterministic evaluation.
    pub fn deterministic_action(&self, obs: &[f64]) -> [f64; ACTION_DIM] {
        squash(&self.mean_of(obs))
    }

    fn clamp_log_std(&mut self) {
        for v in &mut self.log_std {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }
}

impl Parameterized for PolicyNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.mean.visit_params(f);
        if self.log_std_grad.len() != self.log_std.len() {
            self.log_std_grad = vec![0.0; self.log_std.len()];
        }
        f(&mut self.log_std, &mut self.log_std_grad);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueNet {
    pub net: Mlp,
}

impl ValueNet {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        ValueNet {
            net: Mlp::new(&sizes, Activation::Tanh, 1.0, rng),
        }
    }

    pub fn value(&self, obs: &[f64]) -> f64 {
        self.net.infer_one(obs)[0]
    }
}

impl Parameterized for ValueNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.net.visit_params(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    /// Pre-squash Gaussian draw.
    pub u: Vec<f64>,
    pub action: [f64; ACTION_DIM],
    pub log_prob: f64,
}

pub fn sample_action<R: Rng + ?Sized>(policy: &PolicyNet, obs: &[f64], rng: &mut R) -> ActionSample {
    let mean = policy.mean_of(obs);
    let u: Vec<f64> = (0..ACTION_DIM)
        .map(|j| {
            let n: f64 = StandardNormal.sample(rng);
            mean[j] + policy.log_std[j].exp() * n
        })
        .collect();
    let log_prob = policy.gaussian_log_prob(&mean, &u) - squash_log_det(&u);
    ActionSample {
        action: squash(&u),
        u,
        log_prob,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub u: Vec<f64>,
    pub action: [f64; ACTION_DIM],
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
}

/// Generalized advantage estimation. `dones[t]` cuts bootstrapping after
/// step `t`; `last_value` bootstraps the final step when it is not done.
/// Returns raw advantages and value targets.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let mask = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * mask - values[t];
        carry = delta + gamma * lambda * mask * carry;
        adv[t] = carry;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to zero mean and unit (population) variance.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    for a in adv {
        *a = (*a - mean) / std;
    }
}

/// GAE over a transition segment with normalized advantages.
pub fn compute_advantages(
    transitions: &[Transition],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let r: Vec<f64> = transitions.iter().map(|t| t.reward).collect();
    let v: Vec<f64> = transitions.iter().map(|t| t.value).collect();
    let d: Vec<bool> = transitions.iter().map(|t| t.done).collect();
    let (mut adv, ret) = compute_gae(&r, &v, &d, last_value, gamma, lambda);
    normalize_advantages(&mut adv);
    (adv, ret)
}

/// One optimization batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub u: Array2<f64>,
    pub old_log_prob: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    pub fn from_transitions(t: &[Transition], advantages: Vec<f64>, returns: Vec<f64>) -> Batch {
        let d = t[0].obs.len();
        let mut obs = Array2::zeros((t.len(), d));
        let mut u = Array2::zeros((t.len(), ACTION_DIM));
        for (i, tr) in t.iter().enumerate() {
            for j in 0..d {
                obs[(i, j)] = tr.obs[j];
            }
            for j in 0..ACTION_DIM {
                u[(i, j)] = tr.u[j];
            }
        }
        Batch {
            obs,
            u,
            old_log_prob: t.iter().map(|x| x.log_prob).collect(),
            advantages,
            returns,
        }
    }

    pub fn len(&self) -> usize {
        self.old_log_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_log_prob.is_empty()
    }

    fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            obs: self.obs.select(Axis(0), idx),
            u: self.u.select(Axis(0), idx),
            old_log_prob: idx.iter().map(|&i| self.old_log_prob[i]).collect(),
            advantages: idx.iter().map(|&i| self.advantages[i]).collect(),
            returns: idx.iter().map(|&i| self.returns[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Per-sample new log-probabilities (squash correction included).
pub fn batch_log_probs(policy: &PolicyNet, obs: &Array2<f64>, u: &Array2<f64>) -> Vec<f64> {
    let mean = policy.mean.infer(obs);
    (0..obs.nrows())
        .map(|i| {
            let m: Vec<f64> = mean.row(i).to_vec();
            let ui: Vec<f64> = u.row(i).to_vec();
            policy.gaussian_log_prob(&m, &ui) - squash_log_det(&ui)
        })
        .collect()
}

/// Clipped surrogate loss `-mean(min(r A, clip(r) A)) - c_ent * H`.
pub fn policy_loss(policy: &PolicyNet, mb: &Batch, clip: f64, entropy_coef: f64) -> f64 {
    let lp = batch_log_probs(policy, &mb.obs, &mb.u);
    let n = mb.len() as f64;
    let mut loss = 0.0;
    for i in 0..mb.len() {
        let ratio = (lp[i] - mb.old_log_prob[i]).exp();
        let a = mb.advantages[i];
        loss -= (ratio * a).min(ratio.clamp(1.0 - clip, 1.0 + clip) * a) / n;
    }
    loss - entropy_coef * gaussian_entropy(policy)
}

fn gaussian_entropy(policy: &PolicyNet) -> f64 {
    policy
        .log_std
        .iter()
        .map(|ls| ls + 0.5 * (LN_2PI + 1.0))
        .sum()
}

/// Accumulates gradients of [`policy_loss`] into the policy. Returns
/// `(loss, approx_kl, clipped fraction)`.
pub fn policy_loss_backward(policy: &mut PolicyNet, mb: &Batch, clip: f64, entropy_coef: f64) -> (f64, f64, f64) {
    let mean = policy.mean.forward(&mb.obs);
    let n = mb.len() as f64;
    let std: Vec<f64> = policy.log_std.iter().map(|l| l.exp()).collect();
    let mut d_mean = Array2::zeros(mean.raw_dim());
    let mut d_log_std = vec![0.0; ACTION_DIM];
    let (mut loss, mut kl, mut clipped) = (0.0, 0.0, 0.0);
    for i in 0..mb.len() {
        let m: Vec<f64> = mean.row(i).to_vec();
        let u: Vec<f64> = mb.u.row(i).to_vec();
        let lp = policy.gaussian_log_prob(&m, &u) - squash_log_det(&u);
        let log_ratio = lp - mb.old_log_prob[i];
        let ratio = log_ratio.exp();
        let a = mb.advantages[i];
        let unclipped = ratio * a;
        let clipped_term = ratio.clamp(1.0 - clip, 1.0 + clip) * a;
        loss -= unclipped.min(clipped_term) / n;
        kl += ((ratio - 1.0) - log_ratio) / n;
        let active = unclipped <= clipped_term;
        if (ratio - 1.0).abs() > clip {
            clipped += 1.0 / n;
        }
        if !active {
            continue;
        }
        // d loss / d log_prob
        let g = -a * ratio / n;
        for j in 0..ACTION_DIM {
            let z = (u[j] - m[j]) / std[j];
            d_mean[(i, j)] += g * z / std[j];
            d_log_std[j] += g * (z * z - 1.0);
        }
    }
    for (j, g) in d_log_std.iter().enumerate() {
        policy.log_std_grad[j] += g - entropy_coef;
    }
    policy.mean.backward(&d_mean);
    (loss - entropy_coef * gaussian_entropy(policy), kl, clipped)
}

pub fn value_loss(value: &ValueNet, mb: &Batch) -> f64 {
    let v = value.net.infer(&mb.obs);
    let n = mb.len() as f64;
    v.column(0)
        .iter()
        .zip(&mb.returns)
        .map(|(p, r)| (p - r).powi(2))
        .sum::<f64>()
        / n
}

/// Value loss with gradients accumulated into `value`.
pub fn value_loss_backward(value: &mut ValueNet, mb: &Batch) -> f64 {
    let v = value.net.forward(&mb.obs);
    let n = mb.len() as f64;
    let mut grad = Array2::zeros(v.raw_dim());
    let mut loss = 0.0;
    for i in 0..mb.len() {
        let e = v[(i, 0)] - mb.returns[i];
        loss += e * e / n;
        grad[(i, 0)] = 2.0 * e / n;
    }
    value.net.backward(&grad);
    loss
}

/// Optimizer state for both networks.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub policy: Adam,
    pub value: Adam,
}

impl Optimizers {
    pub fn new(lr: f64) -> Self {
        Optimizers {
            policy: Adam::new(lr),
            value: Adam::new(lr),
        }
    }
}

/// Runs `epochs` passes of shuffled minibatch updates over `batch`.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut PolicyNet,
    value: &mut ValueNet,
    opt: &mut Optimizers,
    batch: &Batch,
    config: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty PPO batch".into()));
    }
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    let mut stats = UpdateStats::default();
    let mut count = 0.0;
    for _ in 0..config.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(config.minibatch) {
            let mb = batch.select(chunk);
            policy.zero_grad();
            let (pl, kl, cf) = policy_loss_backward(policy, &mb, config.clip, config.entropy_coef);
            value.zero_grad();
            let vl = value_loss_backward(value, &mb);
            if !(pl.is_finite() && vl.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite PPO loss (policy {pl}, value {vl})"
                )));
            }
            policy.clip_grad_norm(config.max_grad_norm);
            value.clip_grad_norm(config.max_grad_norm);
            opt.policy.step(policy);
            opt.value.step(value);
            policy.clamp_log_std();
            stats.policy_loss += pl;
            stats.value_loss += vl;
            stats.approx_kl += kl;
            stats.clip_fraction += cf;
            count += 1.0;
        }
    }
    stats.policy_loss /= count;
    stats.value_loss /= count;
    stats.approx_kl /= count;
    stats.clip_fraction /= count;
    Ok(stats)
}

/// Trained actor-critic pair plus enough metadata to rebuild an environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Agent {
    pub policy: PolicyNet,
    pub value: ValueNet,
    pub episodes_trained: usize,
    pub config: PpoConfig,
}

impl Agent {
    pub fn new(obs_dim: usize, config: &PpoConfig) -> Agent {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Agent {
            policy: PolicyNet::new(obs_dim, &config.hidden, config.log_std_init, &mut rng),
            value: ValueNet::new(obs_dim, &config.hidden, &mut rng),
            episodes_trained: 0,
            config: config.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        persist::save(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Agent> {
        persist::load(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION, "PPO checkpoint")
    }

    pub fn to_json(&self) -> Result<String> {
        persist::to_string(CHECKPOINT_FORMAT, CHECKPOINT_VERSION, self)
    }
}

/// One row of the learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub completion_time: f64,
    pub success: bool,
    pub punishment_count: u64,
}

pub fn write_learning_curve(path: &Path, rows: &[EpisodeRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_learning_curve(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Seed for episode `k` of a run seeded with `base`.
pub fn episode_seed(base: u64, k: usize) -> u64 {
    let mut z = base ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Completion time of an episode in seconds: the end time on success,
/// otherwise the time limit.
pub fn completion_time(env: &CommEnv, success: bool) -> f64 {
    let c = env.config();
    let steps = if success { env.state().t } else { c.t_max_steps };
    steps as f64 * c.dt
}

/// Called after every finished training episode.
pub type EpisodeHook<'a> = dyn FnMut(&EpisodeRecord, &Agent) -> Result<()> + 'a;

/// Runs PPO on `env` for `config.max_episodes` episodes, updating every
/// `rollout_len` steps. Episodes ending at the time limit are treated as
/// terminal.
pub fn train_loop(
    env: &mut CommEnv,
    config: &PpoConfig,
    hook: &mut EpisodeHook<'_>,
) -> Result<(Agent, Vec<EpisodeRecord>)> {
    config.validate()?;
    let mut agent = Agent::new(env.observation_dim(), config);
    let mut opt = Optimizers::new(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut buffer: Vec<Transition> = Vec::with_capacity(config.rollout_len);
    let mut curve = Vec::with_capacity(config.max_episodes);

    for episode in 0..config.max_episodes {
        let mut obs = env.reset(episode_seed(config.seed, episode))?;
        let mut ret = 0.0;
        loop {
            let s = sample_action(&agent.policy, &obs, &mut rng);
            let v = agent.value.value(&obs);
            let r = env.step(EnvAction::from_slice(&s.action))?;
            ret += r.reward;
            let mut reward = r.reward * config.reward_scale;
            if r.terminated && !r.success && config.bootstrap_timeouts {
                reward += config.gamma * agent.value.value(&r.observation);
            }
            buffer.push(Transition {
                obs: std::mem::take(&mut obs),
                u: s.u,
                action: s.action,
                log_prob: s.log_prob,
                reward,
                value: v,
                done: r.terminated,
            });
            obs = r.observation;
            if buffer.len() >= config.rollout_len {
                let last_value = if r.terminated { 0.0 } else { agent.value.value(&obs) };
                let (adv, returns) =
                    compute_advantages(&buffer, last_value, config.gamma, config.gae_lambda);
                let batch = Batch::from_transitions(&buffer, adv, returns);
                let stats = ppo_update(&mut agent.policy, &mut agent.value, &mut opt, &batch, config, &mut rng)?;
                log::debug!("episode {episode}: {stats:?}");
                buffer.clear();
            }
            if r.terminated {
                agent.episodes_trained = episode + 1;
                let rec = EpisodeRecord {
                    episode,
                    episode_return: ret,
                    completion_time: completion_time(env, r.success),
                    success: r.success,
                    punishment_count: env.state().punishment_count,
                };
                hook(&rec, &agent)?;
                curve.push(rec);
                break;
            }
        }
    }
    Ok((agent, curve))
}

/// Outcome of one evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub seed: u64,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub completion_time: f64,
    pub success: bool,
    pub punishment_count: u64,
    pub energy_mj: f64,
    pub rows: Vec<TrajectoryRow>,
}

/// Runs one episode with the policy's squashed mean action.
pub fn run_episode(env: &mut CommEnv, policy: &PolicyNet, seed: u64) -> Result<EpisodeOutcome> {
    let mut obs = env.reset(seed)?;
    let mut rows = Vec::new();
    let mut ret = 0.0;
    loop {
        let a = policy.deterministic_action(&obs);
        let r = env.step(EnvAction::from_slice(&a))?;
        ret += r.reward;
        rows.push(r.row);
        obs = r.observation;
        if r.terminated {
            return Ok(EpisodeOutcome {
                seed,
                episode_return: ret,
                completion_time: completion_time(env, r.success),
                success: r.success,
                punishment_count: env.state().punishment_count,
                energy_mj: crate::env::radiated_energy_mj(&rows, env.config().dt),
                rows,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{max_fd_error, sample_indices};

    fn toy_policy(seed: u64) -> PolicyNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PolicyNet::new(3, &[5], [-0.3; ACTION_DIM], &mut rng);
        // larger output weights so the mean actually moves
        p.mean = Mlp::new(&[3, 5, ACTION_DIM], Activation::Tanh, 1.0, &mut rng);
        p
    }

    #[test]
    fn log_prob_matches_direct_density() {
        let p = toy_policy(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = [0.3, -0.7, 0.1];
        for _ in 0..50 {
            let s = sample_action(&p, &obs, &mut rng);
            let mean = p.mean_of(&obs);
            // density of a = lo + (tanh(u) + 1)(hi - lo)/2, by change of variables
            let mut lp = 0.0;
            for j in 0..ACTION_DIM {
                let sd = p.log_std[j].exp();
                let z = (s.u[j] - mean[j]) / sd;
                let dens = (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
                let (lo, hi) = ACTION_RANGES[j];
                let jac = (1.0 - s.u[j].tanh().powi(2)) * (hi - lo) / 2.0;
                lp += (dens / jac).ln();
            }
            assert!((lp - s.log_prob).abs() < 1e-6, "{lp} vs {}", s.log_prob);
            assert!((p.log_prob(&obs, &s.u) - s.log_prob).abs() < 1e-12);
        }
    }

    #[test]
    fn stable_squash_correction_for_large_u() {
        for u in [-40.0, -20.0, 0.0, 3.0, 25.0, 400.0] {
            let v = log_one_minus_tanh_sq(u);
            assert!(v.is_finite());
            if u.abs() < 10.0 {
                assert!((v - (1.0 - u.tanh().powi(2)).ln()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn actions_stay_in_range() {
        let mut p = toy_policy(3);
        p.log_std = vec![LOG_STD_MAX; ACTION_DIM];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in 0..100_000 {
            let obs = [(k % 7) as f64 - 3.0, 0.5, -1.0];
            let s = sample_action(&p, &obs, &mut rng);
            for (j, &(lo, hi)) in ACTION_RANGES.iter().enumerate() {
                assert!(s.action[j] >= lo && s.action[j] <= hi);
            }
        }
    }

    #[test]
    fn near_deterministic_policy_returns_squashed_mean() {
        let mut p = toy_policy(5);
        p.log_std = vec![LOG_STD_MIN; ACTION_DIM];
        let obs = [0.2, 0.2, 0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = sample_action(&p, &obs, &mut rng);
        let d = p.deterministic_action(&obs);
        for j in 0..ACTION_DIM {
            assert!((s.action[j] - d[j]).abs() < 0.05);
        }
    }

    /// Direct recursion `A_t = delta_t + gamma lambda A_{t+1}`.
    fn gae_oracle(r: &[f64], v: &[f64], d: &[bool], last: f64, g: f64, l: f64) -> Vec<f64> {
        fn rec(t: usize, r: &[f64], v: &[f64], d: &[bool], last: f64, g: f64, l: f64) -> f64 {
            let nv = if t + 1 < r.len() { v[t + 1] } else { last };
            let m = if d[t] { 0.0 } else { 1.0 };
            let delta = r[t] + g * nv * m - v[t];
            if t + 1 == r.len() {
                delta
            } else {
                delta + g * l * m * rec(t + 1, r, v, d, last, g, l)
            }
        }
        (0..r.len()).map(|t| rec(t, r, v, d, last, g, l)).collect()
    }

    #[test]
    fn gae_matches_recursive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = [false, false, true, false, false, false, false, true, false, false];
        let (a, ret) = compute_gae(&r, &v, &d, 0.37, 0.99, 0.95);
        let o = gae_oracle(&r, &v, &d, 0.37, 0.99, 0.95);
        for t in 0..10 {
            assert!((a[t] - o[t]).abs() <= 1e-9);
            assert!((ret[t] - a[t] - v[t]).abs() <= 1e-12);
        }
    }

    #[test]
    fn gae_limits() {
        let r = [1.0, 2.0, 3.0, 4.0];
        let z = [0.0; 4];
        let d = [false; 4];
        let (a, _) = compute_gae(&r, &z, &d, 0.0, 1.0, 1.0);
        assert_eq!(a, vec![10.0, 9.0, 7.0, 4.0]);
        let v = [0.5, -0.5, 1.0, 2.0];
        let (a, _) = compute_gae(&r, &v, &d, 3.0, 0.9, 0.0);
        for t in 0..4 {
            let nv = if t < 3 { v[t + 1] } else { 3.0 };
            assert!((a[t] - (r[t] + 0.9 * nv - v[t])).abs() < 1e-15);
        }
    }

    #[test]
    fn advantage_normalization() {
        let mut a: Vec<f64> = (0..100).map(|i| (i as f64).sin() * 3.0 + 7.0).collect();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
    }

    fn toy_batch(p: &PolicyNet, seed: u64, n: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for _ in 0..n {
            let obs: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = sample_action(p, &obs, &mut rng);
            t.push(Transition {
                obs,
                u: s.u,
                action: s.action,
                log_prob: s.log_prob,
                reward: rng.random_range(-1.0..1.0),
                value: 0.0,
                done: false,
            });
        }
        let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ret: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Batch::from_transitions(&t, adv, ret)
    }

    #[test]
    fn ratio_is_one_at_update_start() {
        let p = toy_policy(8);
        let b = toy_batch(&p, 9, 64);
        let lp = batch_log_probs(&p, &b.obs, &b.u);
        for (a, o) in lp.iter().zip(&b.old_log_prob) {
            assert!(((a - o).exp() - 1.0).abs() < 1e-6);
        }
        let clipped = policy_loss(&p, &b, 0.2, 0.0);
        let plain = -b.advantages.iter().sum::<f64>() / b.len() as f64;
        assert!((clipped - plain).abs() < 1e-9);
    }

    #[test]
    fn clip_arithmetic() {
        let clip = 0.2f64;
        let (ratio, a) = (1.5f64, 1.0f64);
        let obj = (ratio * a).min(ratio.clamp(1.0 - clip, 1.0 + clip) * a);
        assert!((obj - 1.2).abs() < 1e-15);
    }

    #[test]
    fn policy_gradient_matches_finite_differences() {
        let mut p = toy_policy(10);
        let mut b = toy_batch(&p, 11, 16);
        // move away from ratio = 1 without crossing the clip boundary
        for lp in &mut b.old_log_prob {
            *lp += 0.05;
        }
        p.zero_grad();
        policy_loss_backward(&mut p, &b, 0.2, 0.01);
        let g = p.flat_grads();
        let idx = sample_indices(g.len(), 60, 12);
        let err = max_fd_error(&mut p, &idx, 1e-6, |m| policy_loss(m, &b, 0.2, 0.01), &g);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn value_gradient_and_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut v = ValueNet::new(3, &[6, 6], &mut rng);
        let p = toy_policy(14);
        let b = toy_batch(&p, 15, 32);
        v.zero_grad();
        value_loss_backward(&mut v, &b);
        let g = v.flat_grads();
        let idx = sample_indices(g.len(), 60, 16);
        let err = max_fd_error(&mut v, &idx, 1e-6, |m| value_loss(m, &b), &g);
        assert!(err < 1e-4, "{err}");

        let mut opt = Adam::new(1e-2);
        let mut last = value_loss(&v, &b);
        for _ in 0..10 {
            v.zero_grad();
            value_loss_backward(&mut v, &b);
            opt.step(&mut v);
            let now = value_loss(&v, &b);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn log_std_stays_bounded() {
        let mut p = toy_policy(17);
        let mut val = ValueNet::new(3, &[4], &mut ChaCha8Rng::seed_from_u64(18));
        let mut b = toy_batch(&p, 19, 64);
        b.advantages = vec![5.0; 64];
        let cfg = PpoConfig {
            lr: 0.5,
            epochs: 20,
            minibatch: 16,
            ..Default::default()
        };
        let mut opt = Optimizers::new(cfg.lr);
        ppo_update(&mut p, &mut val, &mut opt, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(20)).unwrap();
        assert!(p.log_std.iter().all(|l| (LOG_STD_MIN..=LOG_STD_MAX).contains(l)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let agent = Agent::new(24, &PpoConfig::desk());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.json");
        agent.save(&path).unwrap();
        let back = Agent::load(&path).unwrap();
        let obs = vec![0.1; 24];
        assert_eq!(agent.policy.mean_of(&obs), back.policy.mean_of(&obs));
        assert_eq!(agent.value.value(&obs), back.value.value(&obs));
        assert_eq!(back.policy.mean.sizes(), vec![24, 256, 256, 4]);
    }

    #[test]
    fn learning_curve_round_trip() {
        let rows: Vec<EpisodeRecord> = (0..5)
            .map(|k| EpisodeRecord {
                episode: k,
                episode_return: 0.1 * k as f64 - 1e-6,
                completion_time: 80.0 - k as f64,
                success: k % 2 == 0,
                punishment_count: k as u64,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        write_learning_curve(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("episode,return,completion_time,success,punishment_count"));
        assert_eq!(read_learning_curve(&path).unwrap(), rows);
    }
}

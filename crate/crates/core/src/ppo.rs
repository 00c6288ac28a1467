//! PPO training for the recurrent actor-critic.
//!
//! Rollouts run a fixed set of environments in lockstep so the policy can be
//! evaluated as one batch per step. Each environment owns its RNG (action
//! noise, trace choice, episode seeds), which makes a rollout independent of
//! how the environments are split across threads.
//!
//! Updates replay the rollout as contiguous chunks: each chunk starts from
//! the hidden state recorded at its first step and re-runs the GRU forward,
//! zeroing the hidden state after every episode boundary.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::env::{Action, BweEnv, EnvConfig, StateVector, STATE_DIM};
use crate::error::{Error, Result};
use crate::evalharness::{evaluate, PolicyEstimator, TraceSet};
use crate::neural::{
    gaussian_entropy, gaussian_log_prob, gaussian_log_prob_graph, squash, AdamConfig, AdamState,
    Graph, PolicyConfig, PolicyParams, Tensor2, Var,
};
use crate::trace::NetworkTrace;

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    /// Minibatches per epoch; chunks are shuffled and split evenly.
    pub minibatches: usize,
    /// Length of the contiguous sequence chunks replayed in an update.
    pub chunk_len: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Steps collected per environment per iteration.
    pub horizon: usize,
    /// Environments run in lockstep.
    pub num_envs: usize,
    /// OS threads used for collection. Does not change results.
    pub threads: usize,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    /// Divide rewards by the running std of the discounted return.
    pub normalize_rewards: bool,
    pub adam: AdamConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatches: 4,
            chunk_len: 32,
            value_coef: 0.5,
            entropy_coef: 0.01,
            horizon: 512,
            num_envs: 8,
            threads: 1,
            max_grad_norm: 0.5,
            normalize_advantages: true,
            normalize_rewards: true,
            adam: AdamConfig::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::validation(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail(format!("gae_lambda {} outside [0, 1]", self.gae_lambda));
        }
        if !(self.clip > 0.0) {
            return fail(format!("clip {} must be > 0", self.clip));
        }
        if self.horizon == 0 || self.num_envs == 0 || self.chunk_len == 0 || self.minibatches == 0 {
            return fail("horizon, num_envs, chunk_len and minibatches must be >= 1".into());
        }
        if self.horizon % self.chunk_len != 0 {
            return fail(format!(
                "horizon {} is not a multiple of chunk_len {}",
                self.horizon, self.chunk_len
            ));
        }
        if !(self.max_grad_norm > 0.0) || !(self.adam.lr > 0.0) {
            return fail("max_grad_norm and lr must be > 0".into());
        }
        Ok(())
    }
}

/// One agent step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: StateVector,
    /// Action in (0, 1) sent to the environment.
    pub action: f64,
    /// Pre-sigmoid Gaussian sample the log-prob refers to.
    pub pre_action: f64,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    /// The episode ended after this step.
    pub done: bool,
    /// GRU hidden state fed into this step.
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub horizon: usize,
    /// `envs[e][t]`, in step order.
    pub envs: Vec<Vec<Transition>>,
    /// Value of the state following the last transition of each env.
    pub bootstrap: Vec<f64>,
    pub finished_episodes: usize,
    /// Multiplier applied to rewards before advantage estimation.
    pub reward_scale: f64,
}

impl Default for RolloutBuffer {
    fn default() -> Self {
        Self {
            horizon: 0,
            envs: Vec::new(),
            bootstrap: Vec::new(),
            finished_episodes: 0,
            reward_scale: 1.0,
        }
    }
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.envs.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean_reward(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        self.envs.iter().flatten().map(|t| t.reward).sum::<f64>() / n as f64
    }
}

/// Generalized advantage estimates and value targets for one environment's
/// sequence. `dones[t]` stops both the bootstrap and the recursion.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n);
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next_value * not_done - values[t];
        next_adv = delta + gamma * lambda * not_done * next_adv;
        adv[t] = next_adv;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

/// Shift to mean 0 and scale to std 1; constant inputs only get centered.
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for x in xs.iter_mut() {
        *x -= mean;
        if std > 1e-12 {
            *x /= std;
        }
    }
}

/// Per-sample PPO objective `min(rho A, clip(rho, 1-eps, 1+eps) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// GAE over a whole buffer, one vector per environment.
pub fn buffer_advantages(buf: &RolloutBuffer, cfg: &PpoConfig) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut advs = Vec::with_capacity(buf.envs.len());
    let mut targets = Vec::with_capacity(buf.envs.len());
    for (traj, &boot) in buf.envs.iter().zip(&buf.bootstrap) {
        let r: Vec<f64> = traj.iter().map(|t| t.reward * buf.reward_scale).collect();
        let v: Vec<f64> = traj.iter().map(|t| t.value).collect();
        let d: Vec<bool> = traj.iter().map(|t| t.done).collect();
        let (a, tg) = compute_gae(&r, &v, &d, boot, cfg.gamma, cfg.gae_lambda);
        advs.push(a);
        targets.push(tg);
    }
    if cfg.normalize_advantages {
        let mut flat: Vec<f64> = advs.iter().flatten().copied().collect();
        normalize(&mut flat);
        let mut it = flat.into_iter();
        for a in &mut advs {
            for x in a.iter_mut() {
                *x = it.next().unwrap();
            }
        }
    }
    (advs, targets)
}

/// Welford running mean and variance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn std(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        (self.m2 / self.count as f64).sqrt()
    }
}

struct EnvSlot {
    env: BweEnv,
    rng: ChaCha8Rng,
    state: StateVector,
    hidden: Vec<f64>,
}

/// Environments that persist across iterations, so episodes longer than
/// the horizon continue where they stopped.
pub struct RolloutCollector {
    slots: Vec<EnvSlot>,
    corpus: Arc<Vec<Arc<NetworkTrace>>>,
    hidden_dim: usize,
    /// Discounted running return per env, for reward normalization.
    returns: Vec<f64>,
    return_stats: RunningStats,
    /// Use the action mean instead of sampling.
    pub deterministic: bool,
}

impl EnvSlot {
    fn start_episode(&mut self, corpus: &[Arc<NetworkTrace>], hidden_dim: usize) -> Result<()> {
        let idx = self.rng.random_range(0..corpus.len());
        let seed = self.rng.random::<u64>();
        self.env.set_episode(corpus[idx].clone(), seed);
        self.state = self.env.reset()?;
        self.hidden = vec![0.0; hidden_dim];
        Ok(())
    }
}

impl RolloutCollector {
    pub fn new(
        template: &EnvConfig,
        corpus: Vec<Arc<NetworkTrace>>,
        num_envs: usize,
        hidden_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::validation("training corpus is empty"));
        }
        let corpus = Arc::new(corpus);
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let mut slots = Vec::with_capacity(num_envs);
        for index in 0..num_envs {
            let mut slot = EnvSlot {
                env: BweEnv::new(template.clone())?,
                rng: ChaCha8Rng::seed_from_u64(seeder.random()),
                state: StateVector([0.0; STATE_DIM]),
                hidden: Vec::new(),
            };
            slot.start_episode(&corpus, hidden_dim)
                .map_err(|e| env_error(index, e))?;
            slots.push(slot);
        }
        Ok(Self {
            returns: vec![0.0; slots.len()],
            slots,
            corpus,
            hidden_dim,
            return_stats: RunningStats::default(),
            deterministic: false,
        })
    }

    pub fn num_envs(&self) -> usize {
        self.slots.len()
    }

    /// Current hidden state of environment `index`.
    pub fn hidden(&self, index: usize) -> &[f64] {
        &self.slots[index].hidden
    }

    pub fn return_stats(&self) -> &RunningStats {
        &self.return_stats
    }

    /// Run `horizon` steps in every environment with a frozen policy and
    /// set the buffer's reward scale from discounted returns under `gamma`.
    pub fn collect(
        &mut self,
        policy: &PolicyParams,
        horizon: usize,
        threads: usize,
        gamma: f64,
    ) -> Result<RolloutBuffer> {
        if policy.hidden_dim() != self.hidden_dim {
            return Err(Error::validation("policy hidden size differs from the collector's"));
        }
        let threads = threads.clamp(1, self.slots.len());
        let per = self.slots.len().div_ceil(threads);
        let corpus = &*self.corpus;
        let deterministic = self.deterministic;
        let results: Vec<Result<Group>> = if threads == 1 {
            vec![collect_group(&mut self.slots, 0, policy, corpus, horizon, deterministic)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .slots
                    .chunks_mut(per)
                    .enumerate()
                    .map(|(i, group)| {
                        s.spawn(move || collect_group(group, i * per, policy, corpus, horizon, deterministic))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("rollout thread panicked")).collect()
            })
        };
        let mut buf = RolloutBuffer {
            horizon,
            ..Default::default()
        };
        for r in results {
            let g = r?;
            buf.envs.extend(g.envs);
            buf.bootstrap.extend(g.bootstrap);
            buf.finished_episodes += g.finished;
        }
        // Updated in env-major order so the result ignores the thread split.
        for (ret, traj) in self.returns.iter_mut().zip(&buf.envs) {
            for t in traj {
                *ret = gamma * *ret + t.reward;
                self.return_stats.push(*ret);
                if t.done {
                    *ret = 0.0;
                }
            }
        }
        let std = self.return_stats.std();
        buf.reward_scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
        Ok(buf)
    }
}

fn env_error(index: usize, e: Error) -> Error {
    Error::Env {
        index,
        source: Box::new(e),
    }
}

struct Group {
    envs: Vec<Vec<Transition>>,
    bootstrap: Vec<f64>,
    finished: usize,
}

fn batch_inputs(slots: &[EnvSlot], hidden_dim: usize) -> (Tensor2, Tensor2) {
    let mut states = Vec::with_capacity(slots.len() * STATE_DIM);
    let mut hidden = Vec::with_capacity(slots.len() * hidden_dim);
    for s in slots {
        states.extend_from_slice(s.state.as_slice());
        hidden.extend_from_slice(&s.hidden);
    }
    (
        Tensor2::from_vec(slots.len(), STATE_DIM, states),
        Tensor2::from_vec(slots.len(), hidden_dim, hidden),
    )
}

fn collect_group(
    slots: &mut [EnvSlot],
    first_index: usize,
    policy: &PolicyParams,
    corpus: &[Arc<NetworkTrace>],
    horizon: usize,
    deterministic: bool,
) -> Result<Group> {
    let h_dim = policy.hidden_dim();
    let mut envs: Vec<Vec<Transition>> = (0..slots.len()).map(|_| Vec::with_capacity(horizon)).collect();
    let mut finished = 0;
    for _ in 0..horizon {
        let (states, hidden) = batch_inputs(slots, h_dim);
        let out = policy.forward_batch(&states, &hidden)?;
        let std = out.log_std.exp();
        for (i, slot) in slots.iter_mut().enumerate() {
            let mu = out.mu[i];
            let pre = if deterministic {
                mu
            } else {
                mu + std * slot.rng.sample::<f64, _>(StandardNormal)
            };
            let action = squash(pre);
            let log_prob = gaussian_log_prob(pre, mu, out.log_std);
            let step = slot
                .env
                .step(Action::new(action)?)
                .map_err(|e| env_error(first_index + i, e))?;
            envs[i].push(Transition {
                state: slot.state,
                action,
                pre_action: pre,
                log_prob,
                reward: step.reward,
                value: out.value[i],
                done: step.done,
                hidden: std::mem::take(&mut slot.hidden),
            });
            if step.done {
                finished += 1;
                slot.start_episode(corpus, h_dim)
                    .map_err(|e| env_error(first_index + i, e))?;
            } else {
                slot.state = step.state;
                slot.hidden = out.hidden.row(i).to_vec();
            }
        }
    }
    let (states, hidden) = batch_inputs(slots, h_dim);
    let bootstrap = policy.forward_batch(&states, &hidden)?.value;
    Ok(Group {
        envs,
        bootstrap,
        finished,
    })
}

/// A contiguous run of steps from one environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunk {
    pub env: usize,
    pub start: usize,
    pub len: usize,
}

pub fn make_chunks(buf: &RolloutBuffer, chunk_len: usize) -> Vec<Chunk> {
    let mut out = Vec::new();
    for (env, traj) in buf.envs.iter().enumerate() {
        let mut start = 0;
        while start < traj.len() {
            let len = chunk_len.min(traj.len() - start);
            out.push(Chunk { env, start, len });
            start += len;
        }
    }
    out
}

/// Loss terms of one minibatch, as graph variables.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
    pub ratio: Var,
}

/// Build the PPO loss for equal-length `chunks` on `g`.
pub fn minibatch_loss(
    g: &mut Graph<'_>,
    policy: &PolicyParams,
    buf: &RolloutBuffer,
    advantages: &[Vec<f64>],
    targets: &[Vec<f64>],
    chunks: &[Chunk],
    cfg: &PpoConfig,
) -> Result<LossVars> {
    let b = chunks.len();
    let len = chunks[0].len;
    if chunks.iter().any(|c| c.len != len) {
        return Err(Error::validation("minibatch chunks must have equal length"));
    }
    let h_dim = policy.hidden_dim();
    let bound = policy.bind(g);
    let mut h0 = Vec::with_capacity(b * h_dim);
    for c in chunks {
        h0.extend_from_slice(&buf.envs[c.env][c.start].hidden);
    }
    let mut h = g.constant(Tensor2::from_vec(b, h_dim, h0));
    let mut mus = Vec::with_capacity(len);
    let mut values = Vec::with_capacity(len);
    let (mut u, mut lp_old, mut adv, mut tgt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for k in 0..len {
        if k > 0 {
            let resets: Vec<bool> = chunks
                .iter()
                .map(|c| buf.envs[c.env][c.start + k - 1].done)
                .collect();
            if resets.iter().any(|&r| r) {
                let mut mask = Tensor2::filled(b, h_dim, 1.0);
                for (row, _) in resets.iter().enumerate().filter(|(_, &r)| r) {
                    for col in 0..h_dim {
                        mask.set(row, col, 0.0);
                    }
                }
                let m = g.constant(mask);
                h = g.mul(h, m);
            }
        }
        let mut xs = Vec::with_capacity(b * STATE_DIM);
        for c in chunks {
            let tr = &buf.envs[c.env][c.start + k];
            xs.extend_from_slice(tr.state.as_slice());
            u.push(tr.pre_action);
            lp_old.push(tr.log_prob);
            adv.push(advantages[c.env][c.start + k]);
            tgt.push(targets[c.env][c.start + k]);
        }
        let x = g.constant(Tensor2::from_vec(b, STATE_DIM, xs));
        let step = policy.step_graph(g, &bound, x, h);
        mus.push(step.mu);
        values.push(step.value);
        h = step.hidden;
    }
    let n = u.len();
    let mu = g.concat_rows(&mus);
    let value = g.concat_rows(&values);
    let u = g.constant(Tensor2::from_vec(n, 1, u));
    let lp_old = g.constant(Tensor2::from_vec(n, 1, lp_old));
    let adv = g.constant(Tensor2::from_vec(n, 1, adv));
    let tgt = g.constant(Tensor2::from_vec(n, 1, tgt));

    let lp = gaussian_log_prob_graph(g, u, mu, bound.log_std);
    let diff = g.sub(lp, lp_old);
    let ratio = g.exp(diff);
    let surr = g.mul(ratio, adv);
    let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let clipped = g.mul(clipped, adv);
    let obj = g.min(surr, clipped);
    let obj = g.mean(obj);
    let policy_loss = g.scale(obj, -1.0);

    let err = g.sub(value, tgt);
    let sq = g.square(err);
    let value_loss = g.mean(sq);

    // Entropy of the pre-sigmoid Gaussian depends only on log_std.
    let entropy = g.add_scalar(bound.log_std, gaussian_entropy(0.0));

    let v = g.scale(value_loss, cfg.value_coef);
    let e = g.scale(entropy, -cfg.entropy_coef);
    let total = g.add(policy_loss, v);
    let total = g.add(total, e);
    Ok(LossVars {
        total,
        policy: policy_loss,
        value: value_loss,
        entropy,
        ratio,
    })
}

/// Diagnostics averaged over the minibatches of one update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
}

/// Clipped-surrogate PPO epochs over `buf`. On a non-finite loss or
/// gradient, parameters and optimizer state are restored and an error is
/// returned.
pub fn ppo_update(
    policy: &mut PolicyParams,
    opt: &mut AdamState,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    let (advantages, targets) = buffer_advantages(buf, cfg);
    let mut chunks = make_chunks(buf, cfg.chunk_len);
    if chunks.is_empty() {
        return Ok(UpdateStats::default());
    }
    let saved = (policy.clone(), opt.clone());
    let mut stats = UpdateStats::default();
    let mut batches = 0usize;
    for _ in 0..cfg.epochs {
        chunks.shuffle(rng);
        // Group by length so every minibatch unrolls a rectangular batch.
        chunks.sort_by_key(|c| std::cmp::Reverse(c.len));
        let mut groups: Vec<&[Chunk]> = Vec::new();
        let per = chunks.len().div_ceil(cfg.minibatches).max(1);
        let mut rest = &chunks[..];
        while !rest.is_empty() {
            let len = rest[0].len;
            let same = rest.iter().take_while(|c| c.len == len).count().min(per);
            groups.push(&rest[..same]);
            rest = &rest[same..];
        }
        for mb in groups {
            let result = {
                let mut g = Graph::new(policy.store());
                let vars = minibatch_loss(&mut g, policy, buf, &advantages, &targets, mb, cfg)?;
                let total = g.value(vars.total).get(0, 0);
                if !total.is_finite() {
                    Err(format!("loss is {total}"))
                } else {
                    g.backward(vars.total)?;
                    let mut grads = g.take_gradients()?;
                    let norm = grads.global_norm();
                    if !norm.is_finite() {
                        Err(format!("gradient norm is {norm}"))
                    } else {
                        if norm > cfg.max_grad_norm {
                            grads.scale(cfg.max_grad_norm / norm);
                        }
                        let ratio = g.value(vars.ratio);
                        let clipped = ratio
                            .data()
                            .iter()
                            .filter(|r| (**r - 1.0).abs() > cfg.clip)
                            .count();
                        let kl = ratio.data().iter().map(|r| r - 1.0 - r.ln()).sum::<f64>();
                        stats.policy_loss += g.value(vars.policy).get(0, 0);
                        stats.value_loss += g.value(vars.value).get(0, 0);
                        stats.entropy += g.value(vars.entropy).get(0, 0);
                        stats.clip_fraction += clipped as f64 / ratio.len() as f64;
                        stats.approx_kl += kl / ratio.len() as f64;
                        stats.grad_norm += norm;
                        Ok(grads)
                    }
                }
            };
            match result {
                Ok(grads) => {
                    opt.step(policy.store_mut().tensors_mut(), &grads)?;
                    batches += 1;
                }
                Err(msg) => {
                    *policy = saved.0;
                    *opt = saved.1;
                    return Err(Error::Numeric {
                        layer: "ppo loss".into(),
                        msg: format!("{msg}; update aborted, parameters restored"),
                    });
                }
            }
        }
    }
    let n = batches.max(1) as f64;
    stats.policy_loss /= n;
    stats.value_loss /= n;
    stats.entropy /= n;
    stats.clip_fraction /= n;
    stats.approx_kl /= n;
    stats.grad_norm /= n;
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub ppo: PpoConfig,
    pub policy: PolicyConfig,
    /// Environment template; its trace is replaced per episode.
    pub env: EnvConfig,
    pub iterations: usize,
    /// Environment-step budget; an iteration that would exceed it is not run.
    pub max_env_steps: Option<u64>,
    /// Evaluate every `eval_every` iterations (0 disables periodic eval).
    pub eval_every: usize,
    /// Traces for best-checkpoint selection; empty uses the training corpus.
    pub eval_traces: TraceSet,
}

impl TrainConfig {
    pub fn new(env: EnvConfig) -> Self {
        Self {
            ppo: PpoConfig::default(),
            policy: PolicyConfig::default(),
            env,
            iterations: 100,
            max_env_steps: None,
            eval_every: 10,
            eval_traces: TraceSet::default(),
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub steps: u64,
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str =
        "iteration,steps,mean_reward,policy_loss,value_loss,entropy,clip_fraction";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.steps,
            self.mean_reward,
            self.policy_loss,
            self.value_loss,
            self.entropy,
            self.clip_fraction
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial: PolicyParams,
    pub last: PolicyParams,
    /// Parameters with the best evaluation reward seen.
    pub best: PolicyParams,
    pub best_eval_reward: f64,
    pub log: Vec<LogRow>,
}

/// Mean per-step reward of the deterministic policy over `traces`.
pub fn eval_reward(policy: &PolicyParams, env: &EnvConfig, traces: &TraceSet, seed: u64) -> Result<f64> {
    let policy = Arc::new(policy.clone());
    let out = evaluate(
        "policy",
        |_| Box::new(PolicyEstimator::new(policy.clone(), env.scaling, env.action_map)),
        traces,
        env,
        seed,
    )?;
    Ok(out.summary.reward_mean)
}

fn init_policy(cfg: &PolicyConfig, seeds: &mut ChaCha8Rng) -> PolicyParams {
    PolicyParams::init(&PolicyConfig {
        seed: seeds.random(),
        ..cfg.clone()
    })
}

/// The untrained policy that `train` starts from for this config and seed.
pub fn initial_policy(cfg: &TrainConfig, seed: u64) -> PolicyParams {
    init_policy(&cfg.policy, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Collect, estimate advantages and update for `cfg.iterations` rounds.
/// `on_iteration` sees every log row as it is produced, plus the current
/// best parameters whenever they change.
pub fn train(
    cfg: &TrainConfig,
    corpus: &TraceSet,
    seed: u64,
    on_iteration: &mut dyn FnMut(&LogRow, Option<&PolicyParams>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.ppo.validate()?;
    if corpus.is_empty() {
        return Err(Error::validation("training corpus is empty"));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = init_policy(&cfg.policy, &mut seeds);
    let initial = policy.clone();
    let mut opt = AdamState::new(cfg.ppo.adam, policy.store().tensors());
    let mut collector = RolloutCollector::new(
        &cfg.env,
        corpus.traces(),
        cfg.ppo.num_envs,
        policy.hidden_dim(),
        seeds.random(),
    )?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds.random());
    let eval_set = if cfg.eval_traces.is_empty() {
        corpus
    } else {
        &cfg.eval_traces
    };
    let eval_seed: u64 = seeds.random();

    let mut best = policy.clone();
    let mut best_eval_reward = eval_reward(&policy, &cfg.env, eval_set, eval_seed)?;
    let mut log = Vec::new();
    let mut steps = 0u64;
    let per_iteration = (cfg.ppo.horizon * cfg.ppo.num_envs) as u64;
    let within_budget = |steps: u64| cfg.max_env_steps.is_none_or(|m| steps + per_iteration <= m);
    for iteration in 1..=cfg.iterations {
        if !within_budget(steps) {
            break;
        }
        let mut buf = collector.collect(&policy, cfg.ppo.horizon, cfg.ppo.threads, cfg.ppo.gamma)?;
        if !cfg.ppo.normalize_rewards {
            buf.reward_scale = 1.0;
        }
        steps += buf.len() as u64;
        let stats = ppo_update(&mut policy, &mut opt, &buf, &cfg.ppo, &mut shuffle_rng)?;
        let row = LogRow {
            iteration,
            steps,
            mean_reward: buf.mean_reward(),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
        };
        let last_iteration = iteration == cfg.iterations || !within_budget(steps);
        let mut improved = false;
        if (cfg.eval_every > 0 && iteration % cfg.eval_every == 0) || last_iteration {
            let r = eval_reward(&policy, &cfg.env, eval_set, eval_seed)?;
            if r > best_eval_reward {
                best_eval_reward = r;
                best = policy.clone();
                improved = true;
            }
        }
        on_iteration(&row, improved.then_some(&best))?;
        log.push(row);
    }
    Ok(TrainOutcome {
        initial,
        last: policy,
        best,
        best_eval_reward,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::LinkParams;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn gae_single_terminal_step() {
        let (a, t) = compute_gae(&[1.0], &[0.0], &[true], 123.0, 0.99, 0.95);
        assert_eq!(a, vec![1.0]);
        assert_eq!(t, vec![1.0]);
    }

    #[test]
    fn gae_two_steps_undiscounted() {
        let (a, _) = compute_gae(&[0.0, 1.0], &[0.0, 0.0], &[false, true], 0.0, 1.0, 1.0);
        assert_eq!(a, vec![1.0, 1.0]);
    }

    #[test]
    fn gae_all_zero() {
        let (a, t) = compute_gae(&[0.0; 5], &[0.0; 5], &[false; 5], 0.0, 0.99, 0.95);
        assert!(a.iter().chain(&t).all(|&x| x == 0.0));
    }

    #[test]
    fn gae_matches_monte_carlo_when_undiscounted() {
        let r = [0.5, -1.0, 2.0, 0.25, 1.0, -0.5, 3.0];
        let v = [0.1, 0.7, -0.3, 0.2, 0.0, 0.4, -1.0];
        let d = [false, false, true, false, false, false, true];
        let (a, _) = compute_gae(&r, &v, &d, 9.0, 1.0, 1.0);
        let mut ret = vec![0.0; r.len()];
        let mut acc = 0.0;
        for t in (0..r.len()).rev() {
            if d[t] {
                acc = 0.0;
            }
            acc += r[t];
            ret[t] = acc;
        }
        for t in 0..r.len() {
            assert!(close(a[t], ret[t] - v[t]), "t={t}");
        }
    }

    #[test]
    fn gae_never_bootstraps_across_done() {
        let (a, _) = compute_gae(&[0.0, 0.0], &[0.0, 1e6], &[true, false], 0.0, 0.99, 0.95);
        assert_eq!(a[0], 0.0);
    }

    #[test]
    fn normalize_gives_zero_mean_unit_std() {
        let mut x = vec![1.0, 2.0, 3.0, 10.0];
        normalize(&mut x);
        let mean = x.iter().sum::<f64>() / 4.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clipped_surrogate(1.1, 2.0, 0.2), 1.1 * 2.0);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        let bad = PpoConfig {
            gamma: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PpoConfig {
            horizon: 100,
            chunk_len: 32,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn small_setup(num_envs: usize, seed: u64) -> (PolicyParams, RolloutCollector) {
        let trace = Arc::new(NetworkTrace::constant(LinkParams::new(1500.0, 20.0, 0.0), 1_000).unwrap());
        let policy = PolicyParams::init(&PolicyConfig {
            trunk_dim: 8,
            hidden_dim: 6,
            ..Default::default()
        });
        let collector =
            RolloutCollector::new(&EnvConfig::new(trace.clone()), vec![trace], num_envs, 6, seed).unwrap();
        (policy, collector)
    }

    #[test]
    fn single_step_rollout() {
        let (policy, mut c) = small_setup(1, 1);
        let buf = c.collect(&policy, 1, 1, 0.99).unwrap();
        assert_eq!(buf.len(), 1);
        assert!(buf.envs[0][0].log_prob.is_finite());
        assert_eq!(buf.bootstrap.len(), 1);
    }

    #[test]
    fn hidden_resets_after_done() {
        // 1 s trace = 20 steps; the warm-up is step 0, so 19 agent steps.
        let (policy, mut c) = small_setup(1, 2);
        let buf = c.collect(&policy, 30, 1, 0.99).unwrap();
        let traj = &buf.envs[0];
        let k = traj.iter().position(|t| t.done).unwrap();
        assert_eq!(k, 18);
        assert!(traj[k + 1].hidden.iter().all(|&v| v == 0.0));
        assert!(traj[k].hidden.iter().any(|&v| v != 0.0));
        assert_eq!(buf.finished_episodes, 1);
    }

    #[test]
    fn tiny_std_gives_mean_actions() {
        let (mut policy, mut c) = small_setup(2, 3);
        *policy.store_mut().get_mut(15) = Tensor2::scalar(-60.0);
        let buf = c.collect(&policy, 5, 1, 0.99).unwrap();
        for traj in &buf.envs {
            let mut h = policy.initial_hidden();
            for t in traj {
                let out = policy.forward(&t.state, &h).unwrap();
                assert!((t.action - out.mean).abs() < 1e-12);
                h = out.hidden;
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_rollouts() {
        let (policy, mut a) = small_setup(4, 9);
        let (_, mut b) = small_setup(4, 9);
        let ra = a.collect(&policy, 25, 1, 0.99).unwrap();
        let rb = b.collect(&policy, 25, 3, 0.99).unwrap();
        assert_eq!(ra.envs, rb.envs);
        assert_eq!(ra.bootstrap, rb.bootstrap);
    }

    fn loss_parts(policy: &PolicyParams, buf: &RolloutBuffer, adv: &[Vec<f64>], cfg: &PpoConfig) -> (f64, Vec<Tensor2>) {
        let (_, targets) = buffer_advantages(buf, cfg);
        let chunks = make_chunks(buf, cfg.chunk_len);
        let mut g = Graph::new(policy.store());
        let v = minibatch_loss(&mut g, policy, buf, adv, &targets, &chunks, cfg).unwrap();
        let pl = g.value(v.policy).get(0, 0);
        g.backward(v.policy).unwrap();
        (pl, g.take_gradients().unwrap().params)
    }

    #[test]
    fn identity_ratio_gives_negative_mean_advantage() {
        let (policy, mut c) = small_setup(2, 4);
        let buf = c.collect(&policy, 8, 1, 0.99).unwrap();
        let cfg = PpoConfig {
            chunk_len: 8,
            ..Default::default()
        };
        let adv: Vec<Vec<f64>> = (0..2).map(|e| (0..8).map(|t| (e * 8 + t) as f64 * 0.1 - 0.5).collect()).collect();
        let mean = adv.iter().flatten().sum::<f64>() / 16.0;
        let (pl, _) = loss_parts(&policy, &buf, &adv, &cfg);
        assert!((pl + mean).abs() < 1e-12, "{pl} vs {}", -mean);
    }

    #[test]
    fn zero_advantages_give_zero_policy_gradient() {
        let (policy, mut c) = small_setup(2, 5);
        let buf = c.collect(&policy, 8, 1, 0.99).unwrap();
        let cfg = PpoConfig {
            chunk_len: 4,
            ..Default::default()
        };
        let adv = vec![vec![0.0; 8]; 2];
        let chunks = make_chunks(&buf, 4);
        let (_, targets) = buffer_advantages(&buf, &cfg);
        let mut g = Graph::new(policy.store());
        let v = minibatch_loss(&mut g, &policy, &buf, &adv, &targets, &chunks, &cfg).unwrap();
        assert_eq!(g.value(v.policy).get(0, 0), 0.0);
        g.backward(v.policy).unwrap();
        assert!(g
            .gradients()
            .unwrap()
            .params
            .iter()
            .all(|t| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn update_changes_parameters_and_is_deterministic() {
        let run = || {
            let (mut policy, mut c) = small_setup(2, 6);
            let cfg = PpoConfig {
                horizon: 16,
                chunk_len: 8,
                minibatches: 2,
                epochs: 2,
                ..Default::default()
            };
            let mut opt = AdamState::new(cfg.adam, policy.store().tensors());
            let buf = c.collect(&policy, cfg.horizon, 1, 0.99).unwrap();
            let before = policy.clone();
            let stats = ppo_update(&mut policy, &mut opt, &buf, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_ne!(before, policy);
            assert!(stats.value_loss.is_finite());
            policy
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_loss_restores_parameters() {
        let (mut policy, mut c) = small_setup(1, 7);
        let cfg = PpoConfig {
            horizon: 8,
            chunk_len: 8,
            ..Default::default()
        };
        let mut buf = c.collect(&policy, 8, 1, 0.99).unwrap();
        buf.envs[0][3].reward = f64::NAN;
        let mut opt = AdamState::new(cfg.adam, policy.store().tensors());
        let before = policy.clone();
        let err = ppo_update(&mut policy, &mut opt, &buf, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
        assert_eq!(before, policy);
        assert_eq!(opt.steps(), 0);
    }

    fn tiny_train_config(corpus: &TraceSet) -> TrainConfig {
        let mut cfg = TrainConfig::new(EnvConfig::new(corpus.traces()[0].clone()));
        cfg.policy.trunk_dim = 8;
        cfg.policy.hidden_dim = 8;
        cfg.ppo.horizon = 16;
        cfg.ppo.chunk_len = 8;
        cfg.ppo.num_envs = 2;
        cfg.eval_every = 2;
        cfg.iterations = 3;
        cfg
    }

    fn tiny_corpus() -> TraceSet {
        let t = NetworkTrace::constant(LinkParams::new(2000.0, 20.0, 0.0), 2_000).unwrap();
        std::iter::once(("c".to_string(), Arc::new(t))).collect()
    }

    #[test]
    fn zero_iterations_return_the_initial_policy() {
        let corpus = tiny_corpus();
        let mut cfg = tiny_train_config(&corpus);
        cfg.iterations = 0;
        let out = train(&cfg, &corpus, 3, &mut |_, _| Ok(())).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.best, out.initial);
        assert_eq!(out.last, out.initial);
        assert_eq!(initial_policy(&cfg, 3), out.initial);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = tiny_corpus();
        let cfg = tiny_train_config(&corpus);
        let a = train(&cfg, &corpus, 5, &mut |_, _| Ok(())).unwrap();
        let b = train(&cfg, &corpus, 5, &mut |_, _| Ok(())).unwrap();
        assert_eq!(a.log.len(), 3);
        assert_eq!(a.log, b.log);
        assert_eq!(a.last, b.last);
    }

    #[test]
    fn step_budget_is_never_exceeded() {
        let corpus = tiny_corpus();
        let mut cfg = tiny_train_config(&corpus);
        cfg.iterations = 100;
        cfg.max_env_steps = Some(100);
        let out = train(&cfg, &corpus, 5, &mut |_, _| Ok(())).unwrap();
        // 32 steps per iteration: 3 iterations fit in 100.
        assert_eq!(out.log.len(), 3);
        assert_eq!(out.log.last().unwrap().steps, 96);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let corpus = tiny_corpus();
        let cfg = tiny_train_config(&corpus);
        let err = train(&cfg, &TraceSet::new(), 0, &mut |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn log_row_csv() {
        let row = LogRow {
            iteration: 2,
            steps: 64,
            mean_reward: 0.5,
            policy_loss: -0.25,
            value_loss: 1.0,
            entropy: 0.4,
            clip_fraction: 0.0,
        };
        assert_eq!(row.to_csv(), "2,64,0.5,-0.25,1,0.4,0");
        assert_eq!(LogRow::CSV_HEADER.split(',').count(), 7);
    }
}

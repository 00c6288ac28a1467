//! `--set key=value` configuration overrides.

use rlrtc::env::ActionMap;
use rlrtc::netsim::CrossTrafficMode;
use rlrtc::ppo::{PpoConfig, TrainConfig};
use rlrtc::{EnvConfig, PolicyConfig, TraceGenConfig};

use crate::CliError;

/// Environment knobs that do not depend on a particular trace.
#[derive(Debug, Clone)]
pub struct EnvSettings {
    pub step_ms: f64,
    pub warmup_kbps: f64,
    pub action_map: ActionMap,
    pub queue_limit_ms: f64,
    pub cross: CrossTrafficMode,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub gen: TraceGenConfig,
    pub count: usize,
    pub env: EnvSettings,
    pub ppo: PpoConfig,
    pub policy: PolicyConfig,
    pub iterations: usize,
    pub max_env_steps: Option<u64>,
    pub eval_every: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let probe = EnvConfig::new(std::sync::Arc::new(
            rlrtc::NetworkTrace::constant(rlrtc::LinkParams::new(1000.0, 10.0, 0.0), 1000)
                .expect("valid placeholder trace"),
        ));
        Self {
            gen: TraceGenConfig::default(),
            count: 10,
            env: EnvSettings {
                step_ms: probe.step_ms,
                warmup_kbps: probe.warmup_kbps,
                action_map: probe.action_map,
                queue_limit_ms: probe.call.sim.queue_limit_ms,
                cross: probe.call.sim.cross,
            },
            ppo: PpoConfig::default(),
            policy: PolicyConfig::default(),
            iterations: 100,
            max_env_steps: None,
            eval_every: 10,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Validation(format!("--set {key}: cannot parse `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Validation(format!("--set {key}: expected true or false, got `{value}`"))),
    }
}

fn cross_mode(value: &str) -> Result<CrossTrafficMode, CliError> {
    let bad = || CliError::Validation(format!("--set env.cross: expected off, constant:KBPS or aimd:KBPS, got `{value}`"));
    match value.split_once(':') {
        None if value == "off" => Ok(CrossTrafficMode::Off),
        Some(("constant", r)) => Ok(CrossTrafficMode::Constant {
            rate_kbps: r.parse().map_err(|_| bad())?,
        }),
        Some(("aimd", r)) => Ok(CrossTrafficMode::aimd(r.parse().map_err(|_| bad())?)),
        _ => Err(bad()),
    }
}

impl Settings {
    pub fn from_pairs(pairs: &[String]) -> Result<Self, CliError> {
        let mut s = Self::default();
        for pair in pairs {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{pair}`")))?;
            s.apply(key.trim(), value.trim())?;
        }
        Ok(s)
    }

    pub fn apply(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        match key {
            "gen.count" => self.count = num(key, v)?,
            "gen.duration_s" => self.gen.duration_s = num(key, v)?,
            "gen.capacity_min" => self.gen.capacity_kbps.0 = num(key, v)?,
            "gen.capacity_max" => self.gen.capacity_kbps.1 = num(key, v)?,
            "gen.delay_min" => self.gen.delay_ms.0 = num(key, v)?,
            "gen.delay_max" => self.gen.delay_ms.1 = num(key, v)?,
            "gen.loss_min" => self.gen.loss_rate.0 = num(key, v)?,
            "gen.loss_max" => self.gen.loss_rate.1 = num(key, v)?,
            "gen.segment_min" => self.gen.segment_s.0 = num(key, v)?,
            "gen.segment_max" => self.gen.segment_s.1 = num(key, v)?,
            "env.step_ms" => self.env.step_ms = num(key, v)?,
            "env.warmup_kbps" => self.env.warmup_kbps = num(key, v)?,
            "env.queue_limit_ms" => self.env.queue_limit_ms = num(key, v)?,
            "env.cross" => self.env.cross = cross_mode(v)?,
            "env.action_map" => {
                self.env.action_map = match v {
                    "linear" => ActionMap::Linear,
                    "log" => ActionMap::Log,
                    _ => return Err(CliError::Validation(format!("--set {key}: expected linear or log"))),
                }
            }
            "ppo.gamma" => self.ppo.gamma = num(key, v)?,
            "ppo.lambda" => self.ppo.gae_lambda = num(key, v)?,
            "ppo.clip" => self.ppo.clip = num(key, v)?,
            "ppo.epochs" => self.ppo.epochs = num(key, v)?,
            "ppo.minibatches" => self.ppo.minibatches = num(key, v)?,
            "ppo.chunk_len" => self.ppo.chunk_len = num(key, v)?,
            "ppo.value_coef" => self.ppo.value_coef = num(key, v)?,
            "ppo.entropy_coef" => self.ppo.entropy_coef = num(key, v)?,
            "ppo.horizon" => self.ppo.horizon = num(key, v)?,
            "ppo.workers" | "ppo.num_envs" => self.ppo.num_envs = num(key, v)?,
            "ppo.threads" => self.ppo.threads = num(key, v)?,
            "ppo.max_grad_norm" => self.ppo.max_grad_norm = num(key, v)?,
            "ppo.lr" => self.ppo.adam.lr = num(key, v)?,
            "ppo.normalize_rewards" => self.ppo.normalize_rewards = flag(key, v)?,
            "ppo.normalize_advantages" => self.ppo.normalize_advantages = flag(key, v)?,
            "policy.trunk" => self.policy.trunk_dim = num(key, v)?,
            "policy.hidden" => self.policy.hidden_dim = num(key, v)?,
            "policy.log_std_init" => self.policy.log_std_init = num(key, v)?,
            "train.iterations" => self.iterations = num(key, v)?,
            "train.max_env_steps" => self.max_env_steps = Some(num(key, v)?),
            "train.eval_every" => self.eval_every = num(key, v)?,
            _ => return Err(CliError::Validation(format!("--set: unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Environment template over `trace`.
    pub fn env_config(&self, trace: std::sync::Arc<rlrtc::NetworkTrace>) -> EnvConfig {
        let mut cfg = EnvConfig::new(trace);
        cfg.step_ms = self.env.step_ms;
        cfg.warmup_kbps = self.env.warmup_kbps;
        cfg.action_map = self.env.action_map;
        cfg.call.sim.queue_limit_ms = self.env.queue_limit_ms;
        cfg.call.sim.cross = self.env.cross;
        cfg
    }

    pub fn train_config(&self, env: EnvConfig) -> TrainConfig {
        let mut cfg = TrainConfig::new(env);
        cfg.ppo = self.ppo.clone();
        cfg.policy = self.policy.clone();
        cfg.iterations = self.iterations;
        cfg.max_env_steps = self.max_env_steps;
        cfg.eval_every = self.eval_every;
        cfg
    }
}

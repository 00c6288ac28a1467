//! Episodic bandwidth-estimation environment over a simulated call.
//!
//! Each step delivers the agent's estimate to the sender over the feedback
//! path, advances the call by one window (50 ms by default) and returns the
//! scaled receiver statistics plus the per-window reward. Ground-truth link
//! capacity is only exposed through [`StepInfo`], which estimators never see.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::netsim::{ms_to_us, Micros};
use crate::rtc::{Call, CallConfig, ObservationWindow, MAX_BITRATE_KBPS, MIN_BITRATE_KBPS};
use crate::trace::NetworkTrace;

pub const STATE_DIM: usize = 4;
pub const DEFAULT_STEP_MS: f64 = 50.0;

/// Reward weight on the log receive rate.
const RATE_WEIGHT: f64 = 0.6;
/// Weight on the loss fraction.
const LOSS_WEIGHT: f64 = 10.0;

/// Per-window reward: `0.6 ln(4R + 1) - D - 10 L`, with R in Mb/s, D in
/// seconds and L as a fraction.
pub fn reward(w: &ObservationWindow) -> f64 {
    let r_mbps = w.receive_rate_kbps / 1000.0;
    let d_s = w.avg_rtt_ms / 1000.0;
    RATE_WEIGHT * (4.0 * r_mbps + 1.0).ln() - d_s - LOSS_WEIGHT * w.loss_rate
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateScaling {
    pub rate_kbps: f64,
    pub interval_ms: f64,
    pub rtt_ms: f64,
}

impl Default for StateScaling {
    fn default() -> Self {
        Self {
            rate_kbps: 1000.0,
            interval_ms: 100.0,
            rtt_ms: 1000.0,
        }
    }
}

/// Scaled 4-dim observation: receive rate, packet interval, loss, RTT.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector(pub [f64; STATE_DIM]);

impl StateVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl StateScaling {
    pub fn apply(&self, w: &ObservationWindow) -> StateVector {
        StateVector([
            w.receive_rate_kbps / self.rate_kbps,
            w.avg_packet_interval_ms / self.interval_ms,
            w.loss_rate,
            w.avg_rtt_ms / self.rtt_ms,
        ])
    }
}

pub fn scale_state(w: &ObservationWindow) -> StateVector {
    StateScaling::default().apply(w)
}

/// How the policy's (0, 1) output maps to a bandwidth estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActionMap {
    #[default]
    Linear,
    /// Log-uniform between the sender's floor and 8 Mb/s.
    Log,
}

impl ActionMap {
    pub fn to_kbps(self, raw: f64) -> f64 {
        match self {
            ActionMap::Linear => MAX_BITRATE_KBPS * raw,
            ActionMap::Log => {
                let (lo, hi) = (MIN_BITRATE_KBPS.ln(), MAX_BITRATE_KBPS.ln());
                (lo + raw * (hi - lo)).exp()
            }
        }
    }

    pub fn to_raw(self, kbps: f64) -> f64 {
        match self {
            ActionMap::Linear => kbps / MAX_BITRATE_KBPS,
            ActionMap::Log => {
                let (lo, hi) = (MIN_BITRATE_KBPS.ln(), MAX_BITRATE_KBPS.ln());
                (kbps.max(f64::MIN_POSITIVE).ln() - lo) / (hi - lo)
            }
        }
    }
}

/// Post-sigmoid action in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    raw: f64,
}

impl Action {
    pub fn new(raw: f64) -> Result<Self> {
        if !(raw > 0.0 && raw < 1.0) {
            return Err(Error::Range(format!("action {raw} outside (0, 1)")));
        }
        Ok(Self { raw })
    }

    /// Action that maps to `kbps` under `map`, nudged into the open interval.
    pub fn from_bandwidth(kbps: f64, map: ActionMap) -> Self {
        let raw = map.to_raw(kbps).clamp(1e-9, 1.0 - 1e-9);
        Self { raw }
    }

    pub fn raw(&self) -> f64 {
        self.raw
    }

    pub fn bandwidth_kbps(&self, map: ActionMap) -> f64 {
        map.to_kbps(self.raw)
    }
}

#[derive(Debug, Clone)]
pub struct EnvConfig {
    pub trace: Arc<NetworkTrace>,
    pub step_ms: f64,
    pub seed: u64,
    pub scaling: StateScaling,
    pub action_map: ActionMap,
    pub warmup_kbps: f64,
    pub call: CallConfig,
}

impl EnvConfig {
    pub fn new(trace: Arc<NetworkTrace>) -> Self {
        Self {
            trace,
            step_ms: DEFAULT_STEP_MS,
            seed: 0,
            scaling: StateScaling::default(),
            action_map: ActionMap::Linear,
            warmup_kbps: crate::rtc::DEFAULT_START_KBPS,
            call: CallConfig::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Whole windows that fit in the trace.
    pub fn total_steps(&self) -> usize {
        (self.trace.duration_ms() as f64 / self.step_ms).floor() as usize
    }
}

/// Metrics-only side channel for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub step: usize,
    pub start_ms: f64,
    pub window: ObservationWindow,
    pub capacity_kbps: f64,
    pub estimate_kbps: f64,
    pub target_kbps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub state: StateVector,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

pub struct BweEnv {
    cfg: EnvConfig,
    call: Option<Call>,
    step: usize,
    total_steps: usize,
    done: bool,
}

impl BweEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        if !(cfg.step_ms > 0.0) {
            return Err(Error::validation("step length must be > 0 ms"));
        }
        Ok(Self {
            total_steps: cfg.total_steps(),
            cfg,
            call: None,
            step: 0,
            done: true,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn action_map(&self) -> ActionMap {
        self.cfg.action_map
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn call(&self) -> Option<&Call> {
        self.call.as_ref()
    }

    /// Swap the episode trace and seed; takes effect on the next reset.
    pub fn set_episode(&mut self, trace: Arc<NetworkTrace>, seed: u64) {
        self.cfg.trace = trace;
        self.cfg.seed = seed;
        self.total_steps = self.cfg.total_steps();
    }

    fn step_bounds(&self, step: usize) -> (Micros, Micros) {
        let len = ms_to_us(self.cfg.step_ms);
        (step as Micros * len, (step as Micros + 1) * len)
    }

    fn run_window(&mut self, estimate_kbps: Option<f64>) -> Result<StepResult> {
        let (start, end) = self.step_bounds(self.step);
        let call = self
            .call
            .as_mut()
            .ok_or_else(|| Error::state("environment not reset"))?;
        if let Some(e) = estimate_kbps {
            call.send_feedback(e);
        }
        call.advance(end);
        let window = call.close_window(self.cfg.step_ms);
        let info = StepInfo {
            step: self.step,
            start_ms: start as f64 / 1000.0,
            window,
            capacity_kbps: self.cfg.trace.mean_capacity_kbps(start, end),
            estimate_kbps: estimate_kbps.unwrap_or(self.cfg.warmup_kbps),
            target_kbps: call.sender().target_kbps(),
        };
        self.done = self.step + 1 >= self.total_steps;
        Ok(StepResult {
            state: self.cfg.scaling.apply(&window),
            reward: reward(&window),
            done: self.done,
            info,
        })
    }

    /// Start a fresh call, run the warm-up window at the configured start
    /// rate and return its state.
    pub fn reset(&mut self) -> Result<StateVector> {
        Ok(self.reset_full()?.state)
    }

    /// Like [`reset`](Self::reset) but also returns the warm-up window's
    /// reward and metrics.
    pub fn reset_full(&mut self) -> Result<StepResult> {
        if self.total_steps == 0 {
            return Err(Error::validation(format!(
                "trace of {} ms is shorter than one {} ms step",
                self.cfg.trace.duration_ms(),
                self.cfg.step_ms
            )));
        }
        let mut call_cfg = self.cfg.call.clone();
        call_cfg.sim.seed = self.cfg.seed;
        call_cfg.start_kbps = self.cfg.warmup_kbps;
        self.call = Some(Call::new(self.cfg.trace.clone(), &call_cfg)?);
        self.step = 0;
        self.run_window(None)
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        let kbps = action.bandwidth_kbps(self.cfg.action_map);
        self.step_bandwidth(kbps)
    }

    /// Step with an estimate already in kb/s.
    pub fn step_bandwidth(&mut self, estimate_kbps: f64) -> Result<StepResult> {
        if self.done {
            return Err(Error::state("step called on a finished episode"));
        }
        self.step += 1;
        self.run_window(Some(estimate_kbps))
    }
}

//! Trace-driven RTC bandwidth-estimation lab: simulator, RL environment,
//! recurrent actor-critic trained with PPO, and a UKF baseline.

pub mod env;
pub mod error;
pub mod estimator;
pub mod evalharness;
pub mod netsim;
pub mod neural;
pub mod ppo;
pub mod rtc;
pub mod trace;
pub mod ukf;

pub use env::{reward, scale_state, Action, ActionMap, BweEnv, EnvConfig, StateVector, StepInfo, StepResult};
pub use error::{Error, Result};
pub use estimator::{ConstantEstimator, Estimator, OracleEstimator};
pub use evalharness::{compare, evaluate, percentile, utilization, EpisodeRecord, MetricsSummary, PolicyEstimator, TraceSet};
pub use netsim::{Flow, SimPacket, Simulator};
pub use neural::{PolicyConfig, PolicyParams, Tensor2};
pub use ppo::{train, PpoConfig, RolloutBuffer, TrainConfig, Transition};
pub use rtc::{Call, CallConfig, ObservationWindow};
pub use trace::{sample_trace, LinkParams, NetworkTrace, Segment, TraceGenConfig};
pub use ukf::{RuleController, UkfConfig, UkfEstimator, UkfState};

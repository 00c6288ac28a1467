//! The interface shared by every bandwidth estimator under evaluation: one
//! observation window in, one estimate in kb/s out.

use std::sync::Arc;

use crate::netsim::ms_to_us;
use crate::rtc::ObservationWindow;
use crate::trace::NetworkTrace;

pub trait Estimator: Send {
    fn name(&self) -> &str;

    /// Forget all per-call state.
    fn reset(&mut self);

    /// Consume the window that just closed and return the estimate to feed
    /// back to the sender for the next window.
    fn observe(&mut self, window: &ObservationWindow) -> f64;
}

impl<E: Estimator + ?Sized> Estimator for Box<E> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn reset(&mut self) {
        (**self).reset()
    }

    fn observe(&mut self, window: &ObservationWindow) -> f64 {
        (**self).observe(window)
    }
}

/// Always reports the same estimate.
#[derive(Debug, Clone)]
pub struct ConstantEstimator {
    pub kbps: f64,
}

impl Estimator for ConstantEstimator {
    fn name(&self) -> &str {
        "constant"
    }

    fn reset(&mut self) {}

    fn observe(&mut self, _window: &ObservationWindow) -> f64 {
        self.kbps
    }
}

/// Harness-only estimator that reads the true capacity of the window the
/// estimate will apply to. Used to validate the pipeline, never for
/// learning.
#[derive(Debug, Clone)]
pub struct OracleEstimator {
    trace: Arc<NetworkTrace>,
    step_us: u64,
    next_step: u64,
}

impl OracleEstimator {
    pub fn new(trace: Arc<NetworkTrace>, step_ms: f64) -> Self {
        Self {
            trace,
            step_us: ms_to_us(step_ms),
            next_step: 1,
        }
    }
}

impl Estimator for OracleEstimator {
    fn name(&self) -> &str {
        "oracle"
    }

    fn reset(&mut self) {
        self.next_step = 1;
    }

    fn observe(&mut self, _window: &ObservationWindow) -> f64 {
        let start = self.next_step * self.step_us;
        self.next_step += 1;
        self.trace.params_at_us(start).capacity_kbps
    }
}

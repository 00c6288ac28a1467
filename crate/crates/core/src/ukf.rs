//! Unscented Kalman filter plus rule-based rate controller: the reference
//! estimator the learned policy is compared against.
//!
//! The filter tracks a 2-dim state, available bandwidth (kb/s) and queuing
//! delay gradient (ms per step), under a random-walk process model. It
//! observes the windowed receive rate and the RTT change between windows.
//! Receive rate is censored by what the sender actually sent, so the
//! measurement model is `h(x) = [min(x_bw, sent), x_grad]`.
//!
//! The controller turns the filtered gradient into increase / hold / decrease
//! decisions, never exceeding the filter's bandwidth mean.

use crate::error::{Error, Result};
use crate::estimator::Estimator;
use crate::rtc::{clamp_bitrate, ObservationWindow, DEFAULT_START_KBPS};

pub type Vector<const N: usize> = [f64; N];
pub type Matrix<const N: usize> = [[f64; N]; N];

const JITTER: f64 = 1e-9;
const DIVERGENCE_TRACE: f64 = 1e8;

/// Unscented-transform scaling parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

impl UtParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::validation(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::validation(format!("kappa {} must be >= 0", self.kappa)));
        }
        Ok(())
    }

    pub fn lambda(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (n as f64 + self.kappa) - n as f64
    }
}

#[derive(Debug, Clone)]
pub struct SigmaPoints<const N: usize> {
    pub points: Vec<Vector<N>>,
    pub mean_weights: Vec<f64>,
    pub cov_weights: Vec<f64>,
    /// The covariance needed the jitter repair to factor.
    pub jittered: bool,
}

/// Lower-triangular Cholesky factor, or `None` if `a` is not positive
/// definite.
pub fn cholesky<const N: usize>(a: &Matrix<N>) -> Option<Matrix<N>> {
    let mut l = [[0.0; N]; N];
    for i in 0..N {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

fn add_diag<const N: usize>(a: &Matrix<N>, d: f64) -> Matrix<N> {
    let mut out = *a;
    for (i, row) in out.iter_mut().enumerate() {
        row[i] += d;
    }
    out
}

pub fn symmetrize<const N: usize>(a: &mut Matrix<N>) {
    for i in 0..N {
        for j in (i + 1)..N {
            let m = 0.5 * (a[i][j] + a[j][i]);
            a[i][j] = m;
            a[j][i] = m;
        }
    }
}

fn mat_trace<const N: usize>(a: &Matrix<N>) -> f64 {
    (0..N).map(|i| a[i][i]).sum()
}

/// Generate the 2n+1 sigma points of `(mean, cov)` with standard UT weights.
/// A non-factorable covariance gets one retry with `1e-9 I` added.
pub fn sigma_points<const N: usize>(
    mean: &Vector<N>,
    cov: &Matrix<N>,
    params: &UtParams,
) -> Result<SigmaPoints<N>> {
    let lambda = params.lambda(N);
    let scale = N as f64 + lambda;
    let scaled = cov.map(|row| row.map(|v| v * scale));
    let (l, jittered) = match cholesky(&scaled) {
        Some(l) => (l, false),
        None => match cholesky(&add_diag(&scaled, JITTER)) {
            Some(l) => (l, true),
            None => {
                return Err(Error::Numeric {
                    layer: "ukf".into(),
                    msg: "covariance is not positive definite even after jitter".into(),
                })
            }
        },
    };
    let mut points = Vec::with_capacity(2 * N + 1);
    points.push(*mean);
    for sign in [1.0, -1.0] {
        for col in 0..N {
            let mut p = *mean;
            for (row, v) in p.iter_mut().enumerate() {
                *v += sign * l[row][col];
            }
            points.push(p);
        }
    }
    let w = 1.0 / (2.0 * scale);
    let mut mean_weights = vec![w; 2 * N + 1];
    let mut cov_weights = vec![w; 2 * N + 1];
    mean_weights[0] = lambda / scale;
    cov_weights[0] = lambda / scale + (1.0 - params.alpha * params.alpha + params.beta);
    Ok(SigmaPoints {
        points,
        mean_weights,
        cov_weights,
        jittered,
    })
}

/// Weighted mean and covariance of a set of transformed points.
pub fn reconstruct<const M: usize>(
    points: &[Vector<M>],
    mean_weights: &[f64],
    cov_weights: &[f64],
) -> (Vector<M>, Matrix<M>) {
    let mut mean = [0.0; M];
    for (p, w) in points.iter().zip(mean_weights) {
        for i in 0..M {
            mean[i] += w * p[i];
        }
    }
    let mut cov = [[0.0; M]; M];
    for (p, w) in points.iter().zip(cov_weights) {
        for i in 0..M {
            for j in 0..M {
                cov[i][j] += w * (p[i] - mean[i]) * (p[j] - mean[j]);
            }
        }
    }
    (mean, cov)
}

fn inverse2(a: &Matrix<2>) -> Option<Matrix<2>> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if !(det.abs() > 0.0) || !det.is_finite() {
        return None;
    }
    Some([[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct UkfConfig {
    pub prior_mean: Vector<2>,
    pub prior_cov: Matrix<2>,
    pub process_noise: Matrix<2>,
    pub measurement_noise: Matrix<2>,
    pub ut: UtParams,
}

impl Default for UkfConfig {
    fn default() -> Self {
        Self {
            prior_mean: [DEFAULT_START_KBPS, 0.0],
            prior_cov: [[500.0 * 500.0, 0.0], [0.0, 4.0]],
            process_noise: [[60.0 * 60.0, 0.0], [0.0, 0.25]],
            measurement_noise: [[300.0 * 300.0, 0.0], [0.0, 100.0]],
            ut: UtParams::default(),
        }
    }
}

/// Filter state: mean `[bandwidth kb/s, delay gradient ms/step]` and its
/// covariance.
#[derive(Debug, Clone)]
pub struct UkfState {
    pub mean: Vector<2>,
    pub cov: Matrix<2>,
    cfg: UkfConfig,
    reinitialized: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UkfOutput {
    pub bandwidth_kbps: f64,
    pub delay_gradient: f64,
    pub jittered: bool,
    pub reinitialized: bool,
}

impl UkfState {
    pub fn new(cfg: UkfConfig) -> Result<Self> {
        cfg.ut.validate()?;
        cholesky(&cfg.prior_cov)
            .ok_or_else(|| Error::validation("prior covariance is not positive definite"))?;
        Ok(Self {
            mean: cfg.prior_mean,
            cov: cfg.prior_cov,
            cfg,
            reinitialized: 0,
        })
    }

    pub fn config(&self) -> &UkfConfig {
        &self.cfg
    }

    pub fn reinitializations(&self) -> u64 {
        self.reinitialized
    }

    /// One predict/update cycle. `z = [receive_rate kb/s, rtt_delta ms]`;
    /// `sent_kbps` censors the rate measurement when known.
    pub fn step(&mut self, z: Vector<2>, sent_kbps: Option<f64>) -> Result<UkfOutput> {
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::validation(format!("non-finite measurement {z:?}")));
        }
        let ut = self.cfg.ut;

        // Predict: random walk, so the propagated points are the points.
        let sp = sigma_points(&self.mean, &self.cov, &ut)?;
        let mut jittered = sp.jittered;
        let (pred_mean, mut pred_cov) = reconstruct(&sp.points, &sp.mean_weights, &sp.cov_weights);
        for i in 0..2 {
            for j in 0..2 {
                pred_cov[i][j] += self.cfg.process_noise[i][j];
            }
        }
        symmetrize(&mut pred_cov);

        // Update.
        let sp = sigma_points(&pred_mean, &pred_cov, &ut)?;
        jittered |= sp.jittered;
        let h = |x: &Vector<2>| -> Vector<2> {
            let bw = match sent_kbps {
                Some(s) => x[0].min(s),
                None => x[0],
            };
            [bw, x[1]]
        };
        let zs: Vec<Vector<2>> = sp.points.iter().map(h).collect();
        let (z_hat, mut s) = reconstruct(&zs, &sp.mean_weights, &sp.cov_weights);
        for i in 0..2 {
            for j in 0..2 {
                s[i][j] += self.cfg.measurement_noise[i][j];
            }
        }
        let mut pxz = [[0.0; 2]; 2];
        for ((x, zi), w) in sp.points.iter().zip(&zs).zip(&sp.cov_weights) {
            for i in 0..2 {
                for j in 0..2 {
                    pxz[i][j] += w * (x[i] - pred_mean[i]) * (zi[j] - z_hat[j]);
                }
            }
        }
        let s_inv = inverse2(&s).ok_or_else(|| Error::Numeric {
            layer: "ukf".into(),
            msg: "innovation covariance is singular".into(),
        })?;
        let mut k = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                k[i][j] = pxz[i][0] * s_inv[0][j] + pxz[i][1] * s_inv[1][j];
            }
        }
        let innov = [z[0] - z_hat[0], z[1] - z_hat[1]];
        let mut mean = pred_mean;
        for i in 0..2 {
            mean[i] += k[i][0] * innov[0] + k[i][1] * innov[1];
        }
        // P = P- - K S K^T
        let mut cov = pred_cov;
        for i in 0..2 {
            for j in 0..2 {
                let mut ksk = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        ksk += k[i][a] * s[a][b] * k[j][b];
                    }
                }
                cov[i][j] -= ksk;
            }
        }
        symmetrize(&mut cov);
        if cholesky(&cov).is_none() {
            cov = add_diag(&cov, JITTER);
            jittered = true;
        }

        let mut reinitialized = false;
        if !(mat_trace(&cov) <= DIVERGENCE_TRACE) || !mean.iter().all(|v| v.is_finite()) {
            mean = self.cfg.prior_mean;
            cov = self.cfg.prior_cov;
            self.reinitialized += 1;
            reinitialized = true;
        }
        self.mean = mean;
        self.cov = cov;
        Ok(UkfOutput {
            bandwidth_kbps: mean[0],
            delay_gradient: mean[1],
            jittered,
            reinitialized,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateMode {
    Increase,
    Hold,
    Decrease,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleController {
    pub mode: RateMode,
    pub overuse_threshold: f64,
    pub underuse_threshold: f64,
    pub up_factor: f64,
    pub down_factor: f64,
    pub estimate_kbps: f64,
}

impl Default for RuleController {
    fn default() -> Self {
        Self {
            mode: RateMode::Hold,
            overuse_threshold: 2.0,
            underuse_threshold: -2.0,
            up_factor: 1.05,
            down_factor: 0.85,
            estimate_kbps: DEFAULT_START_KBPS,
        }
    }
}

impl RuleController {
    pub fn validate(&self) -> Result<()> {
        if !(self.down_factor < 1.0 && 1.0 < self.up_factor) {
            return Err(Error::validation("controller needs down < 1 < up"));
        }
        if !(self.underuse_threshold <= self.overuse_threshold) {
            return Err(Error::validation("underuse threshold above overuse threshold"));
        }
        Ok(())
    }

    /// Next estimate from the filter outputs and the measured receive rate.
    ///
    /// Overuse decreases to `down * min(estimate, receive_rate)`, underuse
    /// increases by `up`. Inside the thresholds a decrease settles into hold,
    /// and a hold turns into increase on the following step.
    pub fn control(&mut self, ukf_bandwidth: f64, delay_gradient: f64, receive_rate: f64) -> f64 {
        let prev = self.estimate_kbps;
        let mut next = if delay_gradient > self.overuse_threshold {
            self.mode = RateMode::Decrease;
            (prev * self.down_factor).min(receive_rate * self.down_factor)
        } else if delay_gradient < self.underuse_threshold {
            self.mode = RateMode::Increase;
            prev * self.up_factor
        } else {
            match self.mode {
                RateMode::Decrease => {
                    self.mode = RateMode::Hold;
                    prev
                }
                RateMode::Hold => {
                    self.mode = RateMode::Increase;
                    prev
                }
                RateMode::Increase => prev * self.up_factor,
            }
        };
        next = next.min(ukf_bandwidth);
        if self.mode == RateMode::Decrease {
            next = next.min(prev);
        }
        self.estimate_kbps = clamp_bitrate(next);
        self.estimate_kbps
    }
}

/// UKF + rule controller behind the shared estimator interface.
#[derive(Debug, Clone)]
pub struct UkfEstimator {
    filter: UkfState,
    controller: RuleController,
    initial: (UkfState, RuleController),
    prev_rtt_ms: Option<f64>,
}

impl UkfEstimator {
    pub fn new(cfg: UkfConfig, controller: RuleController) -> Result<Self> {
        controller.validate()?;
        let filter = UkfState::new(cfg)?;
        Ok(Self {
            initial: (filter.clone(), controller.clone()),
            filter,
            controller,
            prev_rtt_ms: None,
        })
    }

    pub fn filter(&self) -> &UkfState {
        &self.filter
    }

    pub fn controller(&self) -> &RuleController {
        &self.controller
    }
}

impl Default for UkfEstimator {
    fn default() -> Self {
        Self::new(UkfConfig::default(), RuleController::default())
            .expect("default UKF config is valid")
    }
}

impl Estimator for UkfEstimator {
    fn name(&self) -> &str {
        "ukf"
    }

    fn reset(&mut self) {
        (self.filter, self.controller) = self.initial.clone();
        self.prev_rtt_ms = None;
    }

    fn observe(&mut self, w: &ObservationWindow) -> f64 {
        let rtt_delta = self.prev_rtt_ms.map_or(0.0, |p| w.avg_rtt_ms - p);
        self.prev_rtt_ms = Some(w.avg_rtt_ms);
        let sent = self.controller.estimate_kbps;
        let rate = if w.valid {
            w.receive_rate_kbps
        } else {
            self.filter.mean[0].min(sent)
        };
        match self.filter.step([rate, rtt_delta], Some(sent)) {
            Ok(out) => self
                .controller
                .control(out.bandwidth_kbps, out.delay_gradient, w.receive_rate_kbps),
            // Keep the last estimate if the filter could not factor its
            // covariance; the next step starts from the repaired state.
            Err(_) => self.controller.estimate_kbps,
        }
    }
}

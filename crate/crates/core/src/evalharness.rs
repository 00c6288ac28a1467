//! Paired evaluation of bandwidth estimators over a trace suite.
//!
//! Every estimator sees the same traces with the same per-trace simulator
//! seeds. Metrics are pooled over all 50 ms steps of all traces: utilization
//! is `sum(R) / sum(capacity)`, loss is `sum(lost) / sum(received + lost)`,
//! and RTT percentiles use the per-step RTT of every window that received
//! at least one packet.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::env::{ActionMap, BweEnv, EnvConfig, StateScaling, StepResult};
use crate::error::{Error, Result};
use crate::estimator::Estimator;
use crate::neural::PolicyParams;
use crate::rtc::ObservationWindow;
use crate::trace::NetworkTrace;

/// Named traces in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct TraceSet {
    entries: Vec<(String, Arc<NetworkTrace>)>,
}

impl TraceSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: impl Into<String>, trace: Arc<NetworkTrace>) {
        self.entries.push((id.into(), trace));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|(id, _)| id.as_str()).collect()
    }

    pub fn traces(&self) -> Vec<Arc<NetworkTrace>> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<NetworkTrace>)> {
        self.entries.iter().map(|(id, t)| (id.as_str(), t))
    }
}

impl FromIterator<(String, Arc<NetworkTrace>)> for TraceSet {
    fn from_iter<I: IntoIterator<Item = (String, Arc<NetworkTrace>)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// One 50 ms step of an evaluated episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub time_ms: f64,
    pub capacity_kbps: f64,
    /// Estimate in force during this window (the warm-up rate at step 0).
    pub estimate_kbps: f64,
    pub receive_rate_kbps: f64,
    pub rtt_ms: f64,
    pub loss_rate: f64,
    pub reward: f64,
    pub received: u64,
    pub lost: u64,
}

impl StepRecord {
    fn from_step(r: &StepResult) -> Self {
        let w: &ObservationWindow = &r.info.window;
        Self {
            time_ms: r.info.start_ms,
            capacity_kbps: r.info.capacity_kbps,
            estimate_kbps: r.info.estimate_kbps,
            receive_rate_kbps: w.receive_rate_kbps,
            rtt_ms: w.avg_rtt_ms,
            loss_rate: w.loss_rate,
            reward: r.reward,
            received: w.received,
            lost: w.lost,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub trace_id: String,
    pub steps: Vec<StepRecord>,
    pub packets_sent: u64,
    pub packets_delivered: u64,
    pub packets_dropped: u64,
}

impl EpisodeRecord {
    pub const SERIES_HEADER: &'static str =
        "time_ms,capacity_kbps,estimate_kbps,receive_rate_kbps,rtt_ms,loss_rate";

    /// Per-step time series as CSV.
    pub fn series_csv(&self) -> String {
        let mut out = String::from(Self::SERIES_HEADER);
        out.push('\n');
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.time_ms, s.capacity_kbps, s.estimate_kbps, s.receive_rate_kbps, s.rtt_ms, s.loss_rate
            );
        }
        out
    }
}

/// Percentage of capacity delivered, from equal-length steps.
pub fn utilization(ep: &EpisodeRecord) -> Result<f64> {
    if ep.steps.is_empty() {
        return Err(Error::validation("episode has no steps"));
    }
    utilization_of(ep.steps.iter())
}

fn utilization_of<'a>(steps: impl Iterator<Item = &'a StepRecord>) -> Result<f64> {
    let (mut r, mut c) = (0.0, 0.0);
    for s in steps {
        r += s.receive_rate_kbps;
        c += s.capacity_kbps;
    }
    if !(c > 0.0) {
        return Err(Error::validation("trace has zero total capacity"));
    }
    Ok(100.0 * r / c)
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest sample
/// (1-based), with `p = 0` giving the minimum.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::validation("percentile of an empty sample"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Range(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub estimator: String,
    pub utilization_pct: f64,
    pub rtt_avg_ms: f64,
    pub rtt_p50_ms: f64,
    pub rtt_p95_ms: f64,
    pub loss_pct: f64,
    pub reward_mean: f64,
    pub trace_ids: Vec<String>,
    pub steps: usize,
}

impl MetricsSummary {
    pub const CSV_HEADER: &'static str =
        "estimator,utilization_pct,rtt_avg_ms,rtt_p50_ms,rtt_p95_ms,loss_pct,reward_mean";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.estimator,
            self.utilization_pct,
            self.rtt_avg_ms,
            self.rtt_p50_ms,
            self.rtt_p95_ms,
            self.loss_pct,
            self.reward_mean
        )
    }

    fn metrics(&self) -> [(&'static str, f64); 6] {
        [
            ("utilization_pct", self.utilization_pct),
            ("rtt_avg_ms", self.rtt_avg_ms),
            ("rtt_p50_ms", self.rtt_p50_ms),
            ("rtt_p95_ms", self.rtt_p95_ms),
            ("loss_pct", self.loss_pct),
            ("reward_mean", self.reward_mean),
        ]
    }
}

/// Pool per-step metrics over a set of episodes.
pub fn summarize(estimator: &str, episodes: &[EpisodeRecord]) -> Result<MetricsSummary> {
    let steps: Vec<&StepRecord> = episodes.iter().flat_map(|e| &e.steps).collect();
    if steps.is_empty() {
        return Err(Error::validation("no steps to summarize"));
    }
    let utilization_pct = utilization_of(steps.iter().copied())?;
    let rtts: Vec<f64> = steps
        .iter()
        .filter(|s| s.received > 0)
        .map(|s| s.rtt_ms)
        .collect();
    let (rtt_avg_ms, rtt_p50_ms, rtt_p95_ms) = if rtts.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        (
            rtts.iter().sum::<f64>() / rtts.len() as f64,
            percentile(&rtts, 50.0)?,
            percentile(&rtts, 95.0)?,
        )
    };
    let received: u64 = steps.iter().map(|s| s.received).sum();
    let lost: u64 = steps.iter().map(|s| s.lost).sum();
    let loss_pct = if received + lost == 0 {
        0.0
    } else {
        100.0 * lost as f64 / (received + lost) as f64
    };
    let reward_mean = steps.iter().map(|s| s.reward).sum::<f64>() / steps.len() as f64;
    Ok(MetricsSummary {
        estimator: estimator.to_string(),
        utilization_pct,
        rtt_avg_ms,
        rtt_p50_ms,
        rtt_p95_ms,
        loss_pct,
        reward_mean,
        trace_ids: episodes.iter().map(|e| e.trace_id.clone()).collect(),
        steps: steps.len(),
    })
}

/// Run one call on `trace` with `estimator` closing the loop.
pub fn run_episode(
    estimator: &mut dyn Estimator,
    template: &EnvConfig,
    trace_id: &str,
    trace: Arc<NetworkTrace>,
    seed: u64,
) -> Result<EpisodeRecord> {
    let mut env = BweEnv::new(template.clone())?;
    env.set_episode(trace, seed);
    estimator.reset();
    let mut step = env.reset_full()?;
    let mut steps = Vec::with_capacity(env.total_steps());
    steps.push(StepRecord::from_step(&step));
    while !step.done {
        let estimate = estimator.observe(&step.info.window);
        step = env.step_bandwidth(estimate)?;
        steps.push(StepRecord::from_step(&step));
    }
    let c = env.call().expect("episode ran").media_counters();
    Ok(EpisodeRecord {
        trace_id: trace_id.to_string(),
        steps,
        packets_sent: c.sent,
        packets_delivered: c.delivered,
        packets_dropped: c.dropped_loss + c.dropped_queue,
    })
}

/// Simulator seed for trace `index` of a suite evaluated with `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer over (seed, index).
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub summary: MetricsSummary,
    pub episodes: Vec<EpisodeRecord>,
}

/// Evaluate a fresh estimator (built per trace by `factory`) on every trace.
pub fn evaluate<F>(
    name: &str,
    mut factory: F,
    traces: &TraceSet,
    template: &EnvConfig,
    seed: u64,
) -> Result<Evaluation>
where
    F: FnMut(&Arc<NetworkTrace>) -> Box<dyn Estimator>,
{
    if traces.is_empty() {
        return Err(Error::validation("evaluation trace set is empty"));
    }
    let mut episodes = Vec::with_capacity(traces.len());
    for (i, (id, trace)) in traces.iter().enumerate() {
        let mut est = factory(trace);
        let ep = run_episode(est.as_mut(), template, id, trace.clone(), episode_seed(seed, i)).map_err(
            |e| Error::Trace {
                trace: id.to_string(),
                source: Box::new(e),
            },
        )?;
        episodes.push(ep);
    }
    Ok(Evaluation {
        summary: summarize(name, &episodes)?,
        episodes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricDelta {
    pub metric: &'static str,
    pub a: f64,
    pub b: f64,
    /// `b - a`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: [MetricsSummary; 2],
    pub deltas: Vec<MetricDelta>,
}

impl Comparison {
    /// Summary table: header plus one row per estimator.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(MetricsSummary::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.to_csv());
            out.push('\n');
        }
        out
    }

    pub fn deltas_csv(&self) -> String {
        let mut out = format!("metric,{},{},delta\n", self.rows[0].estimator, self.rows[1].estimator);
        for d in &self.deltas {
            let _ = writeln!(out, "{},{},{},{}", d.metric, d.a, d.b, d.delta);
        }
        out
    }
}

/// Pair two summaries computed on the same traces.
pub fn compare(a: &MetricsSummary, b: &MetricsSummary) -> Result<Comparison> {
    if a.trace_ids != b.trace_ids || a.steps != b.steps {
        return Err(Error::validation(format!(
            "summaries cover different traces ({} vs {} traces, {} vs {} steps)",
            a.trace_ids.len(),
            b.trace_ids.len(),
            a.steps,
            b.steps
        )));
    }
    let deltas = a
        .metrics()
        .iter()
        .zip(b.metrics())
        .map(|(&(metric, va), (_, vb))| MetricDelta {
            metric,
            a: va,
            b: vb,
            delta: vb - va,
        })
        .collect();
    Ok(Comparison {
        rows: [a.clone(), b.clone()],
        deltas,
    })
}

/// Runs a trained policy as an estimator: scaled window in, mean action out.
#[derive(Debug, Clone)]
pub struct PolicyEstimator {
    params: Arc<PolicyParams>,
    scaling: StateScaling,
    map: ActionMap,
    hidden: Vec<f64>,
}

impl PolicyEstimator {
    pub fn new(params: Arc<PolicyParams>, scaling: StateScaling, map: ActionMap) -> Self {
        let hidden = params.initial_hidden();
        Self {
            params,
            scaling,
            map,
            hidden,
        }
    }
}

impl Estimator for PolicyEstimator {
    fn name(&self) -> &str {
        "policy"
    }

    fn reset(&mut self) {
        self.hidden = self.params.initial_hidden();
    }

    fn observe(&mut self, window: &ObservationWindow) -> f64 {
        let state = self.scaling.apply(window);
        match self.params.forward(&state, &self.hidden) {
            Ok(out) => {
                self.hidden = out.hidden;
                self.map.to_kbps(out.mean)
            }
            // Inputs are always finite; a non-finite activation means the
            // weights are broken, so fall back to the sender floor.
            Err(_) => self.map.to_kbps(0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{ConstantEstimator, OracleEstimator};
    use crate::trace::LinkParams;
    use crate::ukf::UkfEstimator;

    fn step(r: f64, c: f64) -> StepRecord {
        StepRecord {
            time_ms: 0.0,
            capacity_kbps: c,
            estimate_kbps: 0.0,
            receive_rate_kbps: r,
            rtt_ms: 40.0,
            loss_rate: 0.0,
            reward: 0.0,
            received: 1,
            lost: 0,
        }
    }

    fn episode(id: &str, steps: Vec<StepRecord>) -> EpisodeRecord {
        EpisodeRecord {
            trace_id: id.into(),
            steps,
            packets_sent: 0,
            packets_delivered: 0,
            packets_dropped: 0,
        }
    }

    #[test]
    fn utilization_examples() {
        let full = episode("a", vec![step(2000.0, 2000.0), step(1000.0, 1000.0)]);
        assert!((utilization(&full).unwrap() - 100.0).abs() < 1e-12);
        let part = episode("a", vec![step(1500.0, 2000.0); 10]);
        assert!((utilization(&part).unwrap() - 75.0).abs() < 1e-12);
        let none = episode("a", vec![step(0.0, 2000.0); 3]);
        assert_eq!(utilization(&none).unwrap(), 0.0);
        let zero = episode("a", vec![step(0.0, 0.0)]);
        assert!(utilization(&zero).is_err());
    }

    #[test]
    fn percentile_examples() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&xs, 50.0).unwrap(), 50.0);
        assert_eq!(percentile(&xs, 95.0).unwrap(), 95.0);
        assert_eq!(percentile(&xs, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&xs, 100.0).unwrap(), 100.0);
        for p in [0.0, 13.0, 50.0, 99.9, 100.0] {
            assert_eq!(percentile(&[7.5], p).unwrap(), 7.5);
        }
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&xs, 101.0).is_err());
    }

    #[test]
    fn compare_deltas_by_hand() {
        let a = summarize("a", &[episode("t", vec![step(1000.0, 2000.0), step(1000.0, 2000.0)])]).unwrap();
        let mut b_steps = vec![step(1500.0, 2000.0), step(1500.0, 2000.0)];
        b_steps[1].rtt_ms = 60.0;
        b_steps[1].lost = 1;
        let b = summarize("b", &[episode("t", b_steps)]).unwrap();
        let cmp = compare(&a, &b).unwrap();
        let d = |m: &str| cmp.deltas.iter().find(|d| d.metric == m).unwrap().delta;
        assert!((d("utilization_pct") - 25.0).abs() < 1e-12);
        assert!((d("rtt_avg_ms") - 10.0).abs() < 1e-12);
        assert!((d("rtt_p95_ms") - 20.0).abs() < 1e-12);
        assert!((d("loss_pct") - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(cmp.summary_csv().lines().count(), 3);
        assert_eq!(cmp.summary_csv().lines().next().unwrap(), MetricsSummary::CSV_HEADER);
    }

    #[test]
    fn compare_rejects_mismatched_traces() {
        let a = summarize("a", &[episode("t1", vec![step(1.0, 2.0)])]).unwrap();
        let b = summarize(
            "b",
            &[episode("t1", vec![step(1.0, 2.0)]), episode("t2", vec![step(1.0, 2.0)])],
        )
        .unwrap();
        assert!(matches!(compare(&a, &b), Err(Error::Validation(_))));
    }

    fn suite(n: usize, cap: f64, duration_ms: u64) -> TraceSet {
        (0..n)
            .map(|i| {
                let t = NetworkTrace::constant(LinkParams::new(cap, 20.0 + i as f64, 0.0), duration_ms).unwrap();
                (format!("t{i}"), Arc::new(t))
            })
            .collect()
    }

    fn template(traces: &TraceSet) -> EnvConfig {
        EnvConfig::new(traces.traces()[0].clone())
    }

    #[test]
    fn oracle_fills_the_link() {
        let traces = suite(2, 2000.0, 20_000);
        let ev = evaluate(
            "oracle",
            |t| Box::new(OracleEstimator::new(t.clone(), 50.0)),
            &traces,
            &template(&traces),
            1,
        )
        .unwrap();
        assert!(ev.summary.utilization_pct >= 90.0, "{:?}", ev.summary);
        assert!(ev.summary.loss_pct < 0.5);
        assert_eq!(ev.episodes[0].steps.len(), 400);
    }

    #[test]
    fn floor_estimator_sends_little() {
        let traces = suite(1, 2000.0, 10_000);
        let ev = evaluate(
            "floor",
            |_| Box::new(ConstantEstimator { kbps: 0.0 }),
            &traces,
            &template(&traces),
            1,
        )
        .unwrap();
        // Audio alone is 40 kb/s of 2000.
        assert!(ev.summary.utilization_pct < 5.0, "{:?}", ev.summary);
        assert_eq!(ev.summary.loss_pct, 0.0);
    }

    #[test]
    fn evaluation_is_repeatable_and_paired() {
        let traces = suite(2, 1200.0, 5_000);
        let run = || {
            evaluate("ukf", |_| Box::new(UkfEstimator::default()), &traces, &template(&traces), 4).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.summary, b.summary);
        let cmp = compare(&a.summary, &b.summary).unwrap();
        assert!(cmp.deltas.iter().all(|d| d.delta == 0.0));
    }

    #[test]
    fn series_has_one_row_per_step() {
        let traces = suite(1, 1000.0, 3_000);
        let ev = evaluate(
            "c",
            |_| Box::new(ConstantEstimator { kbps: 500.0 }),
            &traces,
            &template(&traces),
            0,
        )
        .unwrap();
        let csv = ev.episodes[0].series_csv();
        assert_eq!(csv.lines().count(), 1 + 60);
        assert_eq!(csv.lines().next().unwrap(), EpisodeRecord::SERIES_HEADER);
    }
}

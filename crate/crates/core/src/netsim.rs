//! Discrete-event simulation of a single trace-driven bottleneck.
//!
//! The forward link carries media and cross traffic through one drop-tail
//! FIFO whose bound is expressed as queuing delay. A second, lossless link
//! mirrors the trace parameters for the feedback path. All times are integer
//! microseconds.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::trace::{LinkParams, NetworkTrace};

pub type Micros = u64;

pub const DEFAULT_QUEUE_LIMIT_MS: f64 = 500.0;

pub fn ms_to_us(ms: f64) -> Micros {
    (ms * 1000.0).round() as Micros
}

pub fn us_to_ms(us: Micros) -> f64 {
    us as f64 / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flow {
    Media,
    Feedback,
    Cross,
}

impl Flow {
    fn index(self) -> usize {
        match self {
            Flow::Media => 0,
            Flow::Feedback => 1,
            Flow::Cross => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Flow::Media => "media",
            Flow::Feedback => "feedback",
            Flow::Cross => "cross",
        }
    }
}

/// A simulated packet record. Not a wire format.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPacket {
    pub id: u64,
    pub flow: Flow,
    pub size: u32,
    pub send_time_us: Micros,
    pub arrival_time_us: Option<Micros>,
    /// Opaque to the simulator; the endpoints use it to find their metadata.
    pub payload_tag: u64,
}

impl SimPacket {
    pub fn new(id: u64, flow: Flow, size: u32, send_time_us: Micros) -> Self {
        Self {
            id,
            flow,
            size,
            send_time_us,
            arrival_time_us: None,
            payload_tag: 0,
        }
    }
}

/// Time to clock `size_bytes` onto a link of `capacity_kbps`, in ms.
pub fn serialization_delay(size_bytes: u32, capacity_kbps: f64) -> Result<f64> {
    if !(capacity_kbps > 0.0) {
        return Err(Error::validation(format!(
            "capacity must be > 0 kb/s, got {capacity_kbps}"
        )));
    }
    Ok(size_bytes as f64 * 8.0 / capacity_kbps)
}

/// Rounded up so the simulated delay never undercuts the exact value.
fn serialization_us(size_bytes: u32, capacity_kbps: f64) -> Micros {
    (size_bytes as f64 * 8000.0 / capacity_kbps).ceil() as Micros
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Loss,
    QueueFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Scheduled {
        departure_us: Micros,
        arrival_us: Micros,
    },
    Dropped(DropReason),
}

/// One direction of the bottleneck: drop-tail FIFO, serialization,
/// propagation and Bernoulli loss.
#[derive(Debug, Clone)]
pub struct BottleneckLink {
    trace: Arc<NetworkTrace>,
    params: LinkParams,
    queue_limit_us: Micros,
    lossy: bool,
    rng: ChaCha8Rng,
    busy_until_us: Micros,
    last_arrival_us: Micros,
    queue: VecDeque<(Micros, u32)>,
    queued_bytes: u64,
}

impl BottleneckLink {
    pub fn new(trace: Arc<NetworkTrace>, queue_limit_ms: f64, seed: u64) -> Self {
        let params = trace.params_at_us(0);
        Self {
            trace,
            params,
            queue_limit_us: ms_to_us(queue_limit_ms),
            lossy: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            busy_until_us: 0,
            last_arrival_us: 0,
            queue: VecDeque::new(),
            queued_bytes: 0,
        }
    }

    /// Disable random loss on this link (the feedback path).
    pub fn lossless(mut self) -> Self {
        self.lossy = false;
        self
    }

    pub fn params(&self) -> LinkParams {
        self.params
    }

    pub fn refresh(&mut self, now_us: Micros) {
        self.params = self.trace.params_at_us(now_us);
    }

    /// Queuing delay a packet arriving at `now_us` would wait before its
    /// own serialization starts.
    pub fn queued_delay_us(&self, now_us: Micros) -> Micros {
        self.busy_until_us.saturating_sub(now_us)
    }

    pub fn queued_bytes(&mut self, now_us: Micros) -> u64 {
        self.drain(now_us);
        self.queued_bytes
    }

    fn drain(&mut self, now_us: Micros) {
        while let Some(&(dep, size)) = self.queue.front() {
            if dep > now_us {
                break;
            }
            self.queue.pop_front();
            self.queued_bytes -= size as u64;
        }
    }

    pub fn enqueue(&mut self, pkt: &SimPacket, now_us: Micros) -> EnqueueOutcome {
        debug_assert!(pkt.send_time_us <= now_us);
        self.drain(now_us);
        // Always consume one draw so the loss stream does not depend on rates.
        let draw: f64 = self.rng.random();
        if self.lossy && draw < self.params.loss_rate {
            return EnqueueOutcome::Dropped(DropReason::Loss);
        }
        let start = now_us.max(self.busy_until_us);
        let capacity = self.trace.params_at_us(start).capacity_kbps;
        let departure_us = start + serialization_us(pkt.size, capacity);
        if departure_us - now_us > self.queue_limit_us {
            return EnqueueOutcome::Dropped(DropReason::QueueFull);
        }
        self.busy_until_us = departure_us;
        self.queue.push_back((departure_us, pkt.size));
        self.queued_bytes += pkt.size as u64;
        let owd = ms_to_us(self.trace.params_at_us(departure_us).one_way_delay_ms);
        // A delay decrease at a segment boundary must not let a later packet
        // overtake an earlier one.
        let arrival_us = (departure_us + owd).max(self.last_arrival_us);
        self.last_arrival_us = arrival_us;
        EnqueueOutcome::Scheduled {
            departure_us,
            arrival_us,
        }
    }
}

struct Scheduled<E> {
    time_us: Micros,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.time_us == other.time_us && self.seq == other.seq
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // Reversed: BinaryHeap is a max-heap and we pop the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time_us
            .cmp(&self.time_us)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Min-time priority queue; events with equal times pop in insertion order.
pub struct EventQueue<E> {
    heap: BinaryHeap<Scheduled<E>>,
    next_seq: u64,
    now_us: Micros,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
            now_us: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now_us(&self) -> Micros {
        self.now_us
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, time_us: Micros, event: E) {
        debug_assert!(time_us >= self.now_us, "event scheduled in the past");
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled {
            time_us,
            seq,
            event,
        });
    }

    pub fn peek_time(&self) -> Option<Micros> {
        self.heap.peek().map(|s| s.time_us)
    }

    /// Pop the next event if it is due at or before `limit_us`.
    pub fn pop_until(&mut self, limit_us: Micros) -> Option<(Micros, E)> {
        if self.heap.peek()?.time_us > limit_us {
            return None;
        }
        let s = self.heap.pop()?;
        self.now_us = s.time_us;
        Some((s.time_us, s.event))
    }

    pub fn advance_to(&mut self, t_us: Micros) {
        debug_assert!(t_us >= self.now_us);
        self.now_us = t_us;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CrossTrafficMode {
    Off,
    Constant { rate_kbps: f64 },
    Aimd {
        initial_kbps: f64,
        increase_kbps: f64,
        backoff: f64,
        min_kbps: f64,
        max_kbps: f64,
    },
}

impl CrossTrafficMode {
    /// AIMD with TCP-like defaults: +50 kb/s per interval, halve on loss.
    pub fn aimd(initial_kbps: f64) -> Self {
        CrossTrafficMode::Aimd {
            initial_kbps,
            increase_kbps: 50.0,
            backoff: 0.5,
            min_kbps: 10.0,
            max_kbps: 100_000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CrossFeedback {
    pub delivered: u64,
    pub lost: u64,
}

/// Competing traffic sharing the forward queue.
#[derive(Debug, Clone)]
pub struct CrossTrafficModel {
    mode: CrossTrafficMode,
    rate_kbps: f64,
}

impl CrossTrafficModel {
    pub fn new(mode: CrossTrafficMode) -> Self {
        let rate_kbps = match mode {
            CrossTrafficMode::Off => 0.0,
            CrossTrafficMode::Constant { rate_kbps } => rate_kbps.max(0.0),
            CrossTrafficMode::Aimd { initial_kbps, .. } => initial_kbps.max(0.0),
        };
        Self { mode, rate_kbps }
    }

    pub fn mode(&self) -> CrossTrafficMode {
        self.mode
    }

    pub fn rate_kbps(&self) -> f64 {
        self.rate_kbps
    }

    /// Bytes to inject over the next `interval_ms`, after folding in the
    /// delivery/loss report for the previous interval.
    pub fn offered_load(&mut self, interval_ms: f64, feedback: CrossFeedback) -> f64 {
        debug_assert!(interval_ms > 0.0);
        if let CrossTrafficMode::Aimd {
            increase_kbps,
            backoff,
            min_kbps,
            max_kbps,
            ..
        } = self.mode
        {
            if feedback.lost > 0 {
                self.rate_kbps = (self.rate_kbps * backoff).max(min_kbps);
            } else if feedback.delivered > 0 {
                self.rate_kbps = (self.rate_kbps + increase_kbps).min(max_kbps);
            }
        }
        self.rate_kbps * interval_ms / 8.0
    }
}

const CROSS_PACKET_BYTES: u32 = 1500;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlowCounters {
    pub sent: u64,
    pub delivered: u64,
    pub dropped_loss: u64,
    pub dropped_queue: u64,
}

impl FlowCounters {
    pub fn in_flight(&self) -> u64 {
        self.sent - self.delivered - self.dropped_loss - self.dropped_queue
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropNotice {
    pub packet: SimPacket,
    pub reason: DropReason,
    pub time_us: Micros,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimOutput {
    pub delivered: Vec<SimPacket>,
    pub drops: Vec<DropNotice>,
}

#[derive(Debug)]
enum Event {
    Arrival(SimPacket),
    SegmentChange,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub queue_limit_ms: f64,
    pub seed: u64,
    pub cross: CrossTrafficMode,
    pub record_log: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            queue_limit_ms: DEFAULT_QUEUE_LIMIT_MS,
            seed: 0,
            cross: CrossTrafficMode::Off,
            record_log: false,
        }
    }
}

/// Forward bottleneck, mirrored feedback path, optional cross traffic.
pub struct Simulator {
    trace: Arc<NetworkTrace>,
    forward: BottleneckLink,
    reverse: BottleneckLink,
    events: EventQueue<Event>,
    counters: [FlowCounters; 3],
    pending: SimOutput,
    cross: CrossTrafficModel,
    cross_report: CrossFeedback,
    cross_debt_bytes: f64,
    cross_next_id: u64,
    log: Option<String>,
}

impl Simulator {
    pub fn new(trace: Arc<NetworkTrace>, cfg: &SimConfig) -> Result<Self> {
        if !(cfg.queue_limit_ms > 0.0) {
            return Err(Error::validation("queue limit must be > 0 ms"));
        }
        let forward = BottleneckLink::new(trace.clone(), cfg.queue_limit_ms, cfg.seed);
        // Distinct stream per link; the reverse link never drops anyway.
        let reverse = BottleneckLink::new(
            trace.clone(),
            cfg.queue_limit_ms,
            cfg.seed ^ 0x9E37_79B9_7F4A_7C15,
        )
        .lossless();
        let mut events = EventQueue::new();
        if let Some(b) = trace.next_boundary_us(0) {
            events.schedule(b, Event::SegmentChange);
        }
        Ok(Self {
            trace,
            forward,
            reverse,
            events,
            counters: [FlowCounters::default(); 3],
            pending: SimOutput::default(),
            cross: CrossTrafficModel::new(cfg.cross),
            cross_report: CrossFeedback::default(),
            cross_debt_bytes: 0.0,
            cross_next_id: 0,
            log: cfg
                .record_log
                .then(|| String::from("time_us,event,flow,id,size,detail\n")),
        })
    }

    pub fn now_us(&self) -> Micros {
        self.events.now_us()
    }

    pub fn trace(&self) -> &Arc<NetworkTrace> {
        &self.trace
    }

    pub fn forward_link(&self) -> &BottleneckLink {
        &self.forward
    }

    pub fn counters(&self, flow: Flow) -> FlowCounters {
        self.counters[flow.index()]
    }

    pub fn pending_events(&self) -> usize {
        self.events.len()
    }

    /// Debug event log as CSV, if recording was enabled.
    pub fn event_log_csv(&self) -> Option<&str> {
        self.log.as_deref()
    }

    fn log_event(&mut self, time_us: Micros, event: &str, pkt: Option<&SimPacket>, detail: &str) {
        if let Some(log) = self.log.as_mut() {
            match pkt {
                Some(p) => writeln!(
                    log,
                    "{time_us},{event},{},{},{},{detail}",
                    p.flow.name(),
                    p.id,
                    p.size
                ),
                None => writeln!(log, "{time_us},{event},,,,{detail}"),
            }
            .unwrap();
        }
    }

    /// Hand a packet to the network at the current simulated time.
    pub fn send(&mut self, mut pkt: SimPacket) -> EnqueueOutcome {
        let now = self.now_us();
        debug_assert!(pkt.size > 0);
        pkt.send_time_us = pkt.send_time_us.min(now);
        let flow = pkt.flow;
        self.counters[flow.index()].sent += 1;
        let link = match flow {
            Flow::Feedback => &mut self.reverse,
            Flow::Media | Flow::Cross => &mut self.forward,
        };
        let outcome = link.enqueue(&pkt, now);
        match outcome {
            EnqueueOutcome::Scheduled { arrival_us, .. } => {
                self.log_event(now, "enqueue", Some(&pkt), &format!("arrival={arrival_us}"));
                self.events.schedule(arrival_us, Event::Arrival(pkt));
            }
            EnqueueOutcome::Dropped(reason) => {
                let c = &mut self.counters[flow.index()];
                let detail = match reason {
                    DropReason::Loss => {
                        c.dropped_loss += 1;
                        "loss"
                    }
                    DropReason::QueueFull => {
                        c.dropped_queue += 1;
                        "queue-full"
                    }
                };
                self.log_event(now, "drop", Some(&pkt), detail);
                if flow == Flow::Cross {
                    self.cross_report.lost += 1;
                }
                self.pending.drops.push(DropNotice {
                    packet: pkt,
                    reason,
                    time_us: now,
                });
            }
        }
        outcome
    }

    /// Dispatch every event due at or before `t_us` and move the clock to
    /// `t_us`. Returns deliveries and drops since the previous call.
    pub fn run_until(&mut self, t_us: Micros) -> SimOutput {
        debug_assert!(t_us >= self.now_us());
        while let Some((time, event)) = self.events.pop_until(t_us) {
            match event {
                Event::Arrival(mut pkt) => {
                    pkt.arrival_time_us = Some(time);
                    self.counters[pkt.flow.index()].delivered += 1;
                    self.log_event(time, "deliver", Some(&pkt), "");
                    if pkt.flow == Flow::Cross {
                        self.cross_report.delivered += 1;
                    } else {
                        self.pending.delivered.push(pkt);
                    }
                }
                Event::SegmentChange => {
                    self.forward.refresh(time);
                    self.reverse.refresh(time);
                    let p = self.forward.params();
                    self.log_event(
                        time,
                        "segment",
                        None,
                        &format!(
                            "capacity={} owd={} loss={}",
                            p.capacity_kbps, p.one_way_delay_ms, p.loss_rate
                        ),
                    );
                    if let Some(b) = self.trace.next_boundary_us(time) {
                        self.events.schedule(b, Event::SegmentChange);
                    }
                }
            }
        }
        self.events.advance_to(t_us);
        std::mem::take(&mut self.pending)
    }

    /// Inject the cross traffic offered over the next `interval_us`.
    pub fn tick_cross_traffic(&mut self, interval_us: Micros) {
        if matches!(self.cross.mode(), CrossTrafficMode::Off) || interval_us == 0 {
            return;
        }
        let report = std::mem::take(&mut self.cross_report);
        self.cross_debt_bytes += self.cross.offered_load(us_to_ms(interval_us), report);
        let now = self.now_us();
        while self.cross_debt_bytes >= CROSS_PACKET_BYTES as f64 {
            self.cross_debt_bytes -= CROSS_PACKET_BYTES as f64;
            let id = self.cross_next_id;
            self.cross_next_id += 1;
            self.send(SimPacket::new(id, Flow::Cross, CROSS_PACKET_BYTES, now));
        }
    }
}

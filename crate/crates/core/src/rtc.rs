//! Simulated RTC endpoints.
//!
//! The sender emits synthetic video frames and audio packets at a target
//! bitrate that the receiver sets through feedback messages. The receiver
//! aggregates arrivals into fixed windows of receive rate, packet spacing,
//! loss and RTT. RTT is measured with echoed timestamps: every feedback
//! message carries the send and arrival time of the newest media packet, so
//! when it reaches the sender the forward delay of that packet plus the
//! reverse delay of the feedback is known.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::Result;
use crate::netsim::{
    ms_to_us, us_to_ms, Flow, FlowCounters, Micros, SimConfig, SimOutput, SimPacket, Simulator,
};
use crate::trace::NetworkTrace;

pub const MIN_BITRATE_KBPS: f64 = 10.0;
pub const MAX_BITRATE_KBPS: f64 = 8000.0;
pub const DEFAULT_START_KBPS: f64 = 300.0;
const FEEDBACK_BYTES: u32 = 80;

pub fn clamp_bitrate(kbps: f64) -> f64 {
    if kbps.is_nan() {
        return MIN_BITRATE_KBPS;
    }
    kbps.clamp(MIN_BITRATE_KBPS, MAX_BITRATE_KBPS)
}

/// Synthetic media model.
#[derive(Debug, Clone, PartialEq)]
pub struct MediaConfig {
    pub frame_interval_ms: f64,
    pub max_packet_bytes: u32,
    pub audio_packets_per_s: f64,
    pub audio_packet_bytes: u32,
    pub min_frame_bytes: u32,
}

impl Default for MediaConfig {
    fn default() -> Self {
        Self {
            frame_interval_ms: 1000.0 / 30.0,
            max_packet_bytes: 1200,
            audio_packets_per_s: 50.0,
            audio_packet_bytes: 100,
            min_frame_bytes: 50,
        }
    }
}

impl MediaConfig {
    pub fn audio_kbps(&self) -> f64 {
        self.audio_packets_per_s * self.audio_packet_bytes as f64 * 8.0 / 1000.0
    }
}

#[derive(Debug, Clone)]
pub struct SenderState {
    media: MediaConfig,
    target_kbps: f64,
    next_seq: u64,
    next_frame: u64,
    next_audio: u64,
    frame_debt_bytes: f64,
    emitted_until_us: Micros,
}

impl SenderState {
    pub fn new(media: MediaConfig, start_kbps: f64) -> Self {
        Self {
            media,
            target_kbps: clamp_bitrate(start_kbps),
            next_seq: 0,
            next_frame: 0,
            next_audio: 0,
            frame_debt_bytes: 0.0,
            emitted_until_us: 0,
        }
    }

    pub fn target_kbps(&self) -> f64 {
        self.target_kbps
    }

    pub fn media(&self) -> &MediaConfig {
        &self.media
    }

    fn frame_time_us(&self, k: u64) -> Micros {
        ms_to_us(k as f64 * self.media.frame_interval_ms)
    }

    fn audio_time_us(&self, k: u64) -> Micros {
        ms_to_us(k as f64 * 1000.0 / self.media.audio_packets_per_s)
    }

    /// Time of the next packet this sender will emit.
    pub fn next_due_us(&self) -> Micros {
        let video = self.frame_time_us(self.next_frame);
        if self.media.audio_packets_per_s > 0.0 {
            video.min(self.audio_time_us(self.next_audio))
        } else {
            video
        }
    }

    fn push(&mut self, out: &mut Vec<SimPacket>, size: u32, t_us: Micros) {
        out.push(SimPacket::new(self.next_seq, Flow::Media, size, t_us));
        self.next_seq += 1;
    }

    fn emit_frame(&mut self, out: &mut Vec<SimPacket>, t_us: Micros) {
        let video_kbps = (self.target_kbps - self.media.audio_kbps()).max(0.0);
        let total = video_kbps * self.media.frame_interval_ms / 8.0 + self.frame_debt_bytes;
        let mut bytes = total.floor();
        self.frame_debt_bytes = total - bytes;
        if bytes < self.media.min_frame_bytes as f64 {
            bytes = self.media.min_frame_bytes as f64;
            self.frame_debt_bytes = 0.0;
        }
        let bytes = bytes as u64;
        let max = self.media.max_packet_bytes as u64;
        let n = bytes.div_ceil(max);
        // Near-equal split: the first `bytes % n` packets carry one extra byte.
        let base = bytes / n;
        let extra = bytes % n;
        for i in 0..n {
            let size = base + u64::from(i < extra);
            self.push(out, size as u32, t_us);
        }
    }

    /// Emit every packet scheduled in `[now_us, now_us + interval_us)`, in
    /// send-time order. Each packet's `send_time_us` is its scheduled time.
    pub fn packetize(&mut self, interval_us: Micros, now_us: Micros) -> Vec<SimPacket> {
        debug_assert!(interval_us > 0);
        debug_assert!(now_us >= self.emitted_until_us, "packetize called out of order");
        let end = now_us + interval_us;
        let mut out = Vec::new();
        loop {
            let video = self.frame_time_us(self.next_frame);
            let audio = (self.media.audio_packets_per_s > 0.0)
                .then(|| self.audio_time_us(self.next_audio));
            let next = audio.map_or(video, |a| a.min(video));
            if next >= end {
                break;
            }
            if video == next {
                self.emit_frame(&mut out, video);
                self.next_frame += 1;
            } else if let Some(a) = audio {
                let size = self.media.audio_packet_bytes;
                self.push(&mut out, size, a);
                self.next_audio += 1;
            }
        }
        self.emitted_until_us = end;
        out
    }

    /// Apply a bandwidth estimate. Returns the new target.
    pub fn on_feedback(&mut self, fb: &FeedbackMessage) -> f64 {
        self.target_kbps = clamp_bitrate(fb.bandwidth_estimate_kbps);
        self.target_kbps
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackMessage {
    pub bandwidth_estimate_kbps: f64,
    /// When the receiver sent this message.
    pub receiver_time_us: Micros,
    /// Send and arrival time of the newest media packet seen by the receiver.
    pub echo: Option<(Micros, Micros)>,
}

/// RTT from one feedback message arriving at the sender at `arrival_us`:
/// forward delay of the echoed media packet plus reverse delay of the
/// feedback, excluding the receiver's hold time in between.
pub fn rtt_sample_ms(fb: &FeedbackMessage, arrival_us: Micros) -> Option<f64> {
    let (sent, received) = fb.echo?;
    let forward = received.checked_sub(sent)?;
    let reverse = arrival_us.checked_sub(fb.receiver_time_us)?;
    Some(us_to_ms(forward + reverse))
}

/// Per-window receiver statistics. `receive_rate_kbps`, `loss_rate` and
/// `avg_rtt_ms` are the R, L and D of the reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationWindow {
    pub receive_rate_kbps: f64,
    pub avg_packet_interval_ms: f64,
    pub loss_rate: f64,
    pub avg_rtt_ms: f64,
    pub valid: bool,
    pub received: u64,
    pub lost: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ReceiverState {
    expected_seq: u64,
    bytes: u64,
    received: u64,
    lost: u64,
    arrivals_us: Vec<Micros>,
    rtt_samples_ms: Vec<f64>,
    last_rtt_ms: f64,
    newest: Option<(Micros, Micros)>,
    duplicates: u64,
    last_window: Option<ObservationWindow>,
}

impl ReceiverState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn last_window(&self) -> Option<&ObservationWindow> {
        self.last_window.as_ref()
    }

    /// Newest media packet as (send, arrival), echoed in feedback.
    pub fn newest_echo(&self) -> Option<(Micros, Micros)> {
        self.newest
    }

    pub fn on_packet(&mut self, pkt: &SimPacket) {
        debug_assert!(pkt.arrival_time_us.is_some(), "packet not delivered");
        if pkt.id < self.expected_seq {
            self.duplicates += 1;
            return;
        }
        // The simulator never reorders, so a gap is final.
        self.lost += pkt.id - self.expected_seq;
        self.expected_seq = pkt.id + 1;
        self.received += 1;
        self.bytes += pkt.size as u64;
        let arrival = pkt.arrival_time_us.unwrap_or(pkt.send_time_us);
        self.arrivals_us.push(arrival);
        self.newest = Some((pkt.send_time_us, arrival));
    }

    pub fn on_rtt_sample(&mut self, rtt_ms: f64) {
        self.rtt_samples_ms.push(rtt_ms);
    }

    /// Close the current window and reset the accumulators.
    pub fn close_window(&mut self, window_len_ms: f64) -> ObservationWindow {
        if !self.rtt_samples_ms.is_empty() {
            self.last_rtt_ms =
                self.rtt_samples_ms.iter().sum::<f64>() / self.rtt_samples_ms.len() as f64;
        }
        let w = if self.received == 0 {
            ObservationWindow {
                receive_rate_kbps: 0.0,
                avg_packet_interval_ms: window_len_ms,
                loss_rate: 0.0,
                avg_rtt_ms: self.last_rtt_ms,
                valid: false,
                received: 0,
                lost: self.lost,
                bytes: 0,
            }
        } else {
            let interval = if self.arrivals_us.len() >= 2 {
                let span = self.arrivals_us[self.arrivals_us.len() - 1] - self.arrivals_us[0];
                us_to_ms(span) / (self.arrivals_us.len() - 1) as f64
            } else {
                window_len_ms
            };
            ObservationWindow {
                receive_rate_kbps: self.bytes as f64 * 8.0 / window_len_ms,
                avg_packet_interval_ms: interval,
                loss_rate: self.lost as f64 / (self.lost + self.received) as f64,
                avg_rtt_ms: self.last_rtt_ms,
                valid: true,
                received: self.received,
                lost: self.lost,
                bytes: self.bytes,
            }
        };
        self.bytes = 0;
        self.received = 0;
        self.lost = 0;
        self.arrivals_us.clear();
        self.rtt_samples_ms.clear();
        self.last_window = Some(w);
        w
    }
}

#[derive(Debug, Clone)]
pub struct CallConfig {
    pub media: MediaConfig,
    pub sim: SimConfig,
    pub start_kbps: f64,
    /// Granularity at which the endpoints react to arrivals.
    pub tick_us: Micros,
}

impl Default for CallConfig {
    fn default() -> Self {
        Self {
            media: MediaConfig::default(),
            sim: SimConfig::default(),
            start_kbps: DEFAULT_START_KBPS,
            tick_us: 1000,
        }
    }
}

/// A caller/callee pair joined by the simulated network.
pub struct Call {
    sim: Simulator,
    sender: SenderState,
    receiver: ReceiverState,
    tick_us: Micros,
    in_flight_feedback: HashMap<u64, FeedbackMessage>,
    next_feedback_id: u64,
    target_changes: Vec<(Micros, f64)>,
}

impl Call {
    pub fn new(trace: Arc<NetworkTrace>, cfg: &CallConfig) -> Result<Self> {
        Ok(Self {
            sim: Simulator::new(trace, &cfg.sim)?,
            sender: SenderState::new(cfg.media.clone(), cfg.start_kbps),
            receiver: ReceiverState::new(),
            tick_us: cfg.tick_us.max(1),
            in_flight_feedback: HashMap::new(),
            next_feedback_id: 0,
            target_changes: Vec::new(),
        })
    }

    pub fn now_us(&self) -> Micros {
        self.sim.now_us()
    }

    pub fn sender(&self) -> &SenderState {
        &self.sender
    }

    pub fn receiver(&self) -> &ReceiverState {
        &self.receiver
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    pub fn media_counters(&self) -> FlowCounters {
        self.sim.counters(Flow::Media)
    }

    /// (arrival time, new target) for every feedback the sender applied.
    pub fn target_changes(&self) -> &[(Micros, f64)] {
        &self.target_changes
    }

    /// Send a bandwidth estimate to the sender over the feedback path.
    pub fn send_feedback(&mut self, estimate_kbps: f64) {
        let now = self.now_us();
        let fb = FeedbackMessage {
            bandwidth_estimate_kbps: estimate_kbps,
            receiver_time_us: now,
            echo: self.receiver.newest_echo(),
        };
        let id = self.next_feedback_id;
        self.next_feedback_id += 1;
        self.in_flight_feedback.insert(id, fb);
        let mut pkt = SimPacket::new(id, Flow::Feedback, FEEDBACK_BYTES, now);
        pkt.payload_tag = id;
        self.sim.send(pkt);
    }

    fn dispatch(&mut self, out: SimOutput) {
        for pkt in out.delivered {
            match pkt.flow {
                Flow::Media => self.receiver.on_packet(&pkt),
                Flow::Feedback => {
                    let Some(fb) = self.in_flight_feedback.remove(&pkt.payload_tag) else {
                        continue;
                    };
                    let arrival = pkt.arrival_time_us.unwrap_or(self.now_us());
                    let target = self.sender.on_feedback(&fb);
                    self.target_changes.push((arrival, target));
                    if let Some(rtt) = rtt_sample_ms(&fb, arrival) {
                        self.receiver.on_rtt_sample(rtt);
                    }
                }
                Flow::Cross => {}
            }
        }
        // Feedback rides a lossless path; media drops surface as sequence gaps.
    }

    /// Run the call until `end_us`.
    pub fn advance(&mut self, end_us: Micros) {
        let mut t = self.now_us();
        while t < end_us {
            let tick_end = (t + self.tick_us).min(end_us);
            self.sim.tick_cross_traffic(tick_end - t);
            for pkt in self.sender.packetize(tick_end - t, t) {
                let out = self.sim.run_until(pkt.send_time_us);
                self.dispatch(out);
                self.sim.send(pkt);
            }
            let out = self.sim.run_until(tick_end);
            self.dispatch(out);
            t = tick_end;
        }
    }

    pub fn close_window(&mut self, window_len_ms: f64) -> ObservationWindow {
        self.receiver.close_window(window_len_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::LinkParams;

    fn delivered(id: u64, size: u32, arrival_us: Micros) -> SimPacket {
        let mut p = SimPacket::new(id, Flow::Media, size, 0);
        p.arrival_time_us = Some(arrival_us);
        p
    }

    #[test]
    fn frame_at_one_megabit_splits_into_four_packets() {
        let mut s = SenderState::new(MediaConfig::default(), 1000.0);
        let pkts = s.packetize(1000, 0);
        // Frame 0 and audio 0 are both due at t = 0; the frame goes first.
        let video: Vec<u32> = pkts[..pkts.len() - 1].iter().map(|p| p.size).collect();
        assert_eq!(video.len(), 4);
        assert!(video.iter().all(|&b| b <= 1200));
        let total: u32 = video.iter().sum();
        // (1000 - 40 audio) kb/s * 33.33 ms / 8.
        assert_eq!(total, 4000);
        assert_eq!(pkts.last().unwrap().size, 100);
    }

    #[test]
    fn one_second_at_two_megabits_is_within_two_percent() {
        let mut s = SenderState::new(MediaConfig::default(), 2000.0);
        let mut total = 0u64;
        for k in 0..1000 {
            total += s.packetize(1000, k * 1000).iter().map(|p| p.size as u64).sum::<u64>();
        }
        assert!((245_000..=255_000).contains(&total), "{total}");
    }

    #[test]
    fn floor_rate_still_sends_audio() {
        let mut s = SenderState::new(MediaConfig::default(), 0.0);
        assert_eq!(s.target_kbps(), MIN_BITRATE_KBPS);
        let bytes: u64 = s.packetize(1_000_000, 0).iter().map(|p| p.size as u64).sum();
        let kbps = bytes as f64 * 8.0 / 1000.0;
        assert!(kbps >= MediaConfig::default().audio_kbps(), "{kbps}");
    }

    #[test]
    fn sequence_numbers_increase_across_calls() {
        let mut s = SenderState::new(MediaConfig::default(), 3000.0);
        let mut last = None;
        for k in 0..200 {
            for p in s.packetize(1000, k * 1000) {
                if let Some(l) = last {
                    assert!(p.id > l);
                }
                assert!(p.send_time_us >= k * 1000 && p.send_time_us < (k + 1) * 1000);
                last = Some(p.id);
            }
        }
    }

    #[test]
    fn feedback_clamps_target() {
        let mut s = SenderState::new(MediaConfig::default(), 300.0);
        let fb = |e| FeedbackMessage {
            bandwidth_estimate_kbps: e,
            receiver_time_us: 0,
            echo: None,
        };
        assert_eq!(s.on_feedback(&fb(4000.0)), 4000.0);
        assert_eq!(s.on_feedback(&fb(9000.0)), 8000.0);
        assert_eq!(s.on_feedback(&fb(1.0)), 10.0);
        assert_eq!(s.on_feedback(&fb(f64::NAN)), 10.0);
    }

    #[test]
    fn gaps_count_as_losses() {
        let cases: [(&[u64], u64); 3] = [(&[1, 2, 4], 1), (&[1, 2, 3], 0), (&[1, 5], 3)];
        for (ids, expect) in cases {
            let mut rx = ReceiverState::new();
            rx.expected_seq = ids[0];
            for &id in ids {
                rx.on_packet(&delivered(id, 100, 0));
            }
            assert_eq!(rx.lost, expect, "{ids:?}");
        }
    }

    #[test]
    fn duplicates_are_counted_once() {
        let mut rx = ReceiverState::new();
        rx.on_packet(&delivered(0, 100, 0));
        rx.on_packet(&delivered(1, 100, 0));
        rx.on_packet(&delivered(1, 100, 0));
        assert_eq!(rx.received, 2);
        assert_eq!(rx.duplicates(), 1);
    }

    #[test]
    fn window_statistics() {
        let mut rx = ReceiverState::new();
        for i in 0..10 {
            rx.on_packet(&delivered(i, 625, i * 5000));
        }
        let w = rx.close_window(50.0);
        assert_eq!(w.receive_rate_kbps, 1000.0);
        assert!(w.valid);

        let mut rx = ReceiverState::new();
        for (i, t) in [0u64, 10, 20, 30, 40].iter().enumerate() {
            rx.on_packet(&delivered(i as u64, 100, t * 1000));
        }
        assert_eq!(rx.close_window(50.0).avg_packet_interval_ms, 10.0);

        let mut rx = ReceiverState::new();
        rx.on_packet(&delivered(0, 100, 0));
        rx.on_packet(&delivered(3, 100, 1000));
        assert_eq!(rx.close_window(50.0).loss_rate, 0.5);
    }

    #[test]
    fn empty_window_carries_rtt() {
        let mut rx = ReceiverState::new();
        rx.on_packet(&delivered(0, 100, 0));
        rx.on_rtt_sample(80.0);
        rx.on_rtt_sample(120.0);
        assert_eq!(rx.close_window(50.0).avg_rtt_ms, 100.0);
        let w = rx.close_window(50.0);
        assert!(!w.valid);
        assert_eq!(w.receive_rate_kbps, 0.0);
        assert_eq!(w.avg_packet_interval_ms, 50.0);
        assert_eq!(w.loss_rate, 0.0);
        assert_eq!(w.avg_rtt_ms, 100.0);
    }

    #[test]
    fn rtt_excludes_receiver_hold_time() {
        let fb = FeedbackMessage {
            bandwidth_estimate_kbps: 1.0,
            receiver_time_us: 40_000,
            echo: Some((0, 26_000)),
        };
        assert_eq!(rtt_sample_ms(&fb, 65_000), Some(51.0));
        assert_eq!(rtt_sample_ms(&FeedbackMessage { echo: None, ..fb }, 65_000), None);
    }

    fn call_on(cap: f64, owd: f64) -> Call {
        let trace = NetworkTrace::constant(LinkParams::new(cap, owd, 0.0), 60_000).unwrap();
        Call::new(Arc::new(trace), &CallConfig::default()).unwrap()
    }

    #[test]
    fn symmetric_path_rtt_is_twice_owd() {
        let mut call = call_on(100_000.0, 25.0);
        for step in 1..=20u64 {
            call.send_feedback(300.0);
            call.advance(step * 50_000);
            call.close_window(50.0);
        }
        let d = call.receiver().last_window().unwrap().avg_rtt_ms;
        // 25 ms each way plus well under a millisecond of serialization.
        assert!((50.0..51.0).contains(&d), "{d}");
    }

    #[test]
    fn queuing_delay_adds_to_rtt() {
        // 2x overload for half a second leaves well over 100 ms queued.
        let mut call = call_on(1000.0, 25.0);
        for step in 1..=10u64 {
            call.send_feedback(2000.0);
            call.advance(step * 50_000);
            call.close_window(50.0);
        }
        let q = call.simulator().forward_link().queued_delay_us(call.now_us());
        let d = call.receiver().last_window().unwrap().avg_rtt_ms;
        assert!(q > 100_000, "queue {q}");
        assert!(d > 100.0, "rtt {d}");
    }

    #[test]
    fn feedback_takes_effect_only_after_arrival() {
        let mut call = call_on(2000.0, 30.0);
        call.send_feedback(4000.0);
        call.advance(29_000);
        assert_eq!(call.sender().target_kbps(), DEFAULT_START_KBPS);
        call.advance(50_000);
        assert_eq!(call.sender().target_kbps(), 4000.0);
        let (at, _) = call.target_changes()[0];
        assert!(at >= 30_000);
    }
}

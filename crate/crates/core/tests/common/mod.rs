//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlrtc::neural::{gaussian_log_prob_graph, gru_cell, GruCellParams, Graph, PolicyConfig, PolicyParams, Tensor2};
use rlrtc::netsim::{Flow, SimConfig, SimPacket, Simulator};
use rlrtc::{sample_trace, NetworkTrace, TraceGenConfig};

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor2::from_vec(rows, cols, data)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// GRU update written as plain loops over scalars, one batch row at a time.
pub fn gru_scalar(p: &GruCellParams, x: &Tensor2, h: &Tensor2) -> Tensor2 {
    let (n_in, n_h) = (p.w_z.rows(), p.w_z.cols());
    let mut out = Tensor2::zeros(x.rows(), n_h);
    for b in 0..x.rows() {
        for j in 0..n_h {
            let mut az = p.b_z.get(0, j);
            let mut ar = p.b_r.get(0, j);
            let mut an = 0.0;
            for i in 0..n_in {
                az += x.get(b, i) * p.w_z.get(i, j);
                ar += x.get(b, i) * p.w_r.get(i, j);
                an += x.get(b, i) * p.w_n.get(i, j);
            }
            let mut hn = p.b_n.get(0, j);
            for k in 0..n_h {
                az += h.get(b, k) * p.u_z.get(k, j);
                ar += h.get(b, k) * p.u_r.get(k, j);
                hn += h.get(b, k) * p.u_n.get(k, j);
            }
            let z = sigmoid(az);
            let r = sigmoid(ar);
            let n = (an + r * hn).tanh();
            out.set(b, j, (1.0 - z) * n + z * h.get(b, j));
        }
    }
    out
}

/// Largest absolute difference between the library GRU and the scalar
/// oracle over `instances` random problems.
pub fn gru_oracle_max_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n_in = rng.random_range(1..7);
        let n_h = rng.random_range(1..9);
        let batch = rng.random_range(1..4);
        let mut t = |r, c| random_tensor(&mut rng, r, c, 1.5);
        let p = GruCellParams {
            w_z: t(n_in, n_h),
            w_r: t(n_in, n_h),
            w_n: t(n_in, n_h),
            u_z: t(n_h, n_h),
            u_r: t(n_h, n_h),
            u_n: t(n_h, n_h),
            b_z: t(1, n_h),
            b_r: t(1, n_h),
            b_n: t(1, n_h),
        };
        let x = t(batch, n_in);
        let h = t(batch, n_h);
        let got = gru_cell(&p, &x, &h).unwrap();
        let want = gru_scalar(&p, &x, &h);
        for (a, b) in got.data().iter().zip(want.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Smooth scalar loss over a short unrolled sequence that touches every
/// policy tensor, including log_std.
fn policy_loss(policy: &PolicyParams, xs: &[Tensor2], h0: &Tensor2, u: &Tensor2, want_grads: bool) -> (f64, Vec<Tensor2>) {
    let mut g = Graph::new(policy.store());
    let b = policy.bind(&mut g);
    let mut h = g.constant(h0.clone());
    let mut mus = Vec::new();
    let mut values = Vec::new();
    for x in xs {
        let xv = g.constant(x.clone());
        let step = policy.step_graph(&mut g, &b, xv, h);
        mus.push(step.mu);
        values.push(step.value);
        h = step.hidden;
    }
    let mu = g.concat_rows(&mus);
    let value = g.concat_rows(&values);
    let uv = g.constant(u.clone());
    let lp = gaussian_log_prob_graph(&mut g, uv, mu, b.log_std);
    let lp = g.mean(lp);
    let v2 = g.square(value);
    let v2 = g.mean(v2);
    let v2 = g.scale(v2, 0.7);
    let hs = g.sum(h);
    let hs = g.scale(hs, 0.3);
    let loss = g.add(lp, v2);
    let loss = g.add(loss, hs);
    let val = g.value(loss).get(0, 0);
    if !want_grads {
        return (val, Vec::new());
    }
    g.backward(loss).unwrap();
    (val, g.take_gradients().unwrap().params)
}

/// Worst relative error between analytic and central finite-difference
/// gradients over every scalar of every tensor, with its tensor name.
pub fn policy_gradient_check(seed: u64, step: f64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = PolicyParams::init(&PolicyConfig {
        trunk_dim: 6,
        hidden_dim: 5,
        seed,
        ..Default::default()
    });
    // Non-zero biases and heads so every path carries gradient.
    for id in 0..policy.store().len() {
        let t = policy.store().get(id).clone();
        let noisy = t.zip_map(&random_tensor(&mut rng, t.rows(), t.cols(), 0.3), |a, b| a + b);
        *policy.store_mut().get_mut(id) = noisy;
    }
    let batch = 2;
    let xs: Vec<Tensor2> = (0..3).map(|_| random_tensor(&mut rng, batch, 4, 1.0)).collect();
    let h0 = random_tensor(&mut rng, batch, 5, 0.5);
    let u = random_tensor(&mut rng, 3 * batch, 1, 1.0);
    let (_, grads) = policy_loss(&policy, &xs, &h0, &u, true);
    let mut worst = (0.0, String::new());
    for id in 0..policy.store().len() {
        for k in 0..policy.store().get(id).len() {
            let mut plus = policy.clone();
            plus.store_mut().get_mut(id).data_mut()[k] += step;
            let mut minus = policy.clone();
            minus.store_mut().get_mut(id).data_mut()[k] -= step;
            let fd = (policy_loss(&plus, &xs, &h0, &u, false).0 - policy_loss(&minus, &xs, &h0, &u, false).0)
                / (2.0 * step);
            let an = grads[id].data()[k];
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, policy.store().name(id).to_string());
            }
        }
    }
    worst
}

/// Per-episode facts checked by the simulator property suite.
#[derive(Debug, Default)]
pub struct EpisodeCheck {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub violations: Vec<String>,
    /// (id, arrival) in delivery order, for determinism comparisons.
    pub fingerprint: Vec<(u64, u64)>,
}

fn serialization_us(size: u32, capacity_kbps: f64) -> u64 {
    // Bits over kb/s gives ms; ceil to whole microseconds.
    ((size as f64 * 8.0 / capacity_kbps) * 1000.0).ceil() as u64
}

/// Drive a random trace with random bursty media traffic and check
/// conservation, delay bounds and FIFO delivery.
pub fn simulate_random_episode(seed: u64) -> EpisodeCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trace = sample_trace(&TraceGenConfig {
        capacity_kbps: (100.0, 6000.0),
        delay_ms: (0.0, 120.0),
        loss_rate: (0.0, 0.1),
        segment_s: (0.2, 2.0),
        duration_s: rng.random_range(1.0..4.0),
        seed: rng.random(),
    })
    .unwrap();
    let trace = Arc::new(trace);
    let cfg = SimConfig {
        seed: rng.random(),
        ..Default::default()
    };
    let queue_limit_us = (cfg.queue_limit_ms * 1000.0) as u64;
    let mut sim = Simulator::new(trace.clone(), &cfg).unwrap();
    let (min_owd, max_owd, max_cap) = trace.segments().iter().fold((f64::MAX, 0.0f64, 0.0f64), |acc, s| {
        (
            acc.0.min(s.params.one_way_delay_ms),
            acc.1.max(s.params.one_way_delay_ms),
            acc.2.max(s.params.capacity_kbps),
        )
    });
    let min_owd_us = (min_owd * 1000.0).round() as u64;
    let max_owd_us = (max_owd * 1000.0).round() as u64;
    let mut check = EpisodeCheck::default();
    let mut last_arrival = 0u64;
    let mut next_id = 0u64;
    let end_us = trace.duration_us();
    let mut now = 0u64;
    let mut delivered_ids = Vec::new();
    while now < end_us {
        let burst = rng.random_range(0..6);
        for _ in 0..burst {
            let size = rng.random_range(40..1500);
            sim.send(SimPacket::new(next_id, Flow::Media, size, now));
            next_id += 1;
            check.sent += 1;
        }
        now += rng.random_range(100..20_000);
        let out = sim.run_until(now.min(end_us + 2_000_000));
        for pkt in out.delivered {
            let arrival = pkt.arrival_time_us.unwrap();
            let delay = arrival - pkt.send_time_us;
            let floor = min_owd_us + serialization_us(pkt.size, max_cap);
            if delay < floor {
                check.violations.push(format!("packet {} delay {delay} us below floor {floor}", pkt.id));
            }
            if delay > queue_limit_us + max_owd_us {
                check.violations.push(format!("packet {} delay {delay} us above queue bound", pkt.id));
            }
            if arrival < last_arrival {
                check.violations.push(format!("packet {} arrived out of order", pkt.id));
            }
            last_arrival = arrival;
            delivered_ids.push(pkt.id);
            check.fingerprint.push((pkt.id, arrival));
            check.delivered += 1;
        }
        check.dropped += out.drops.len() as u64;
    }
    // Flush everything in flight.
    let out = sim.run_until(end_us + 10_000_000);
    for pkt in out.delivered {
        check.fingerprint.push((pkt.id, pkt.arrival_time_us.unwrap()));
        delivered_ids.push(pkt.id);
        check.delivered += 1;
    }
    check.dropped += out.drops.len() as u64;
    if delivered_ids.windows(2).any(|w| w[0] >= w[1]) {
        check.violations.push("delivery order differs from send order".into());
    }
    if check.sent != check.delivered + check.dropped {
        check.violations.push(format!(
            "sent {} != delivered {} + dropped {}",
            check.sent, check.delivered, check.dropped
        ));
    }
    let c = sim.counters(Flow::Media);
    if c.sent != check.sent || c.delivered != check.delivered || c.in_flight() != 0 {
        check.violations.push(format!("counters disagree: {c:?}"));
    }
    check
}

/// Constant traces for pipeline checks.
pub fn constant_suite(n: usize, capacity_kbps: f64, duration_ms: u64) -> rlrtc::TraceSet {
    (0..n)
        .map(|i| {
            let p = rlrtc::LinkParams::new(capacity_kbps, 10.0 + 10.0 * i as f64, 0.0);
            (format!("const{i}"), Arc::new(NetworkTrace::constant(p, duration_ms).unwrap()))
        })
        .collect()
}

//! Network traces: piecewise-constant bottleneck parameters over time.
//!
//! A trace is a list of segments, each starting at a millisecond offset and
//! holding the link capacity, one-way delay and random loss rate until the
//! next segment begins. Lookups are left-closed: at exactly a segment's start
//! time the new parameters are already in force.
//!
//! The on-disk format is line oriented:
//!
//! ```text
//! rtctrace v1 duration_ms=30000
//! # start_ms capacity_kbps owd_ms loss_rate
//! 0 2000 25 0
//! 10000 1000 40 0.01
//! ```

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const HEADER_MAGIC: &str = "rtctrace";
const HEADER_VERSION: &str = "v1";

/// Bottleneck parameters in force during one trace segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    pub capacity_kbps: f64,
    pub one_way_delay_ms: f64,
    pub loss_rate: f64,
}

impl LinkParams {
    pub fn new(capacity_kbps: f64, one_way_delay_ms: f64, loss_rate: f64) -> Self {
        Self {
            capacity_kbps,
            one_way_delay_ms,
            loss_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.capacity_kbps.is_finite() && self.capacity_kbps > 0.0) {
            return Err(Error::validation(format!(
                "capacity must be > 0 kb/s, got {}",
                self.capacity_kbps
            )));
        }
        if !(self.one_way_delay_ms.is_finite() && self.one_way_delay_ms >= 0.0) {
            return Err(Error::validation(format!(
                "one-way delay must be >= 0 ms, got {}",
                self.one_way_delay_ms
            )));
        }
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return Err(Error::validation(format!(
                "loss rate must be in [0, 1], got {}",
                self.loss_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start_ms: u64,
    pub params: LinkParams,
}

/// A validated, immutable network trace.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTrace {
    segments: Vec<Segment>,
    duration_ms: u64,
}

impl NetworkTrace {
    pub fn new(segments: Vec<Segment>, duration_ms: u64) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::validation("trace has no segments"));
        }
        if segments[0].start_ms != 0 {
            return Err(Error::validation(format!(
                "segment 0 must start at 0 ms, starts at {}",
                segments[0].start_ms
            )));
        }
        for (i, seg) in segments.iter().enumerate() {
            seg.params
                .validate()
                .map_err(|e| Error::validation(format!("segment {i}: {e}")))?;
            if i > 0 && seg.start_ms <= segments[i - 1].start_ms {
                return Err(Error::validation(format!(
                    "segment {i}: start {} ms is not after previous start {} ms",
                    seg.start_ms,
                    segments[i - 1].start_ms
                )));
            }
        }
        let last = segments[segments.len() - 1].start_ms;
        if duration_ms <= last {
            return Err(Error::validation(format!(
                "duration {duration_ms} ms must exceed last segment start {last} ms"
            )));
        }
        Ok(Self {
            segments,
            duration_ms,
        })
    }

    /// A single-segment trace with constant parameters.
    pub fn constant(params: LinkParams, duration_ms: u64) -> Result<Self> {
        Self::new(
            vec![Segment {
                start_ms: 0,
                params,
            }],
            duration_ms,
        )
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn duration_ms(&self) -> u64 {
        self.duration_ms
    }

    pub fn duration_us(&self) -> u64 {
        self.duration_ms * 1000
    }

    /// Parameters in force at `t_ms`.
    pub fn at(&self, t_ms: u64) -> Result<LinkParams> {
        if t_ms >= self.duration_ms {
            return Err(Error::Range(format!(
                "t = {t_ms} ms outside trace of {} ms",
                self.duration_ms
            )));
        }
        Ok(self.segments[self.index_at_us(t_ms * 1000)].params)
    }

    /// Index of the segment in force at `t_us`. Times past the end map to the
    /// last segment so the simulator can drain in-flight packets.
    pub fn index_at_us(&self, t_us: u64) -> usize {
        // partition_point gives the count of segments with start <= t.
        let n = self
            .segments
            .partition_point(|s| s.start_ms.saturating_mul(1000) <= t_us);
        n.saturating_sub(1)
    }

    pub fn params_at_us(&self, t_us: u64) -> LinkParams {
        self.segments[self.index_at_us(t_us)].params
    }

    /// Start of the first segment beginning strictly after `t_us`, if any.
    pub fn next_boundary_us(&self, t_us: u64) -> Option<u64> {
        let idx = self.index_at_us(t_us);
        self.segments.get(idx + 1).map(|s| s.start_ms * 1000)
    }

    /// Time-averaged capacity over `[start_us, end_us)`.
    pub fn mean_capacity_kbps(&self, start_us: u64, end_us: u64) -> f64 {
        if end_us <= start_us {
            return self.params_at_us(start_us).capacity_kbps;
        }
        let mut t = start_us;
        let mut acc = 0.0;
        while t < end_us {
            let cap = self.params_at_us(t).capacity_kbps;
            let next = self.next_boundary_us(t).unwrap_or(u64::MAX).min(end_us);
            acc += cap * (next - t) as f64;
            t = next;
        }
        acc / (end_us - start_us) as f64
    }

    /// Serialize in the `rtctrace v1` text format. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{HEADER_MAGIC} {HEADER_VERSION} duration_ms={}", self.duration_ms).unwrap();
        for s in &self.segments {
            writeln!(
                out,
                "{} {} {} {}",
                s.start_ms, s.params.capacity_kbps, s.params.one_way_delay_ms, s.params.loss_rate
            )
            .unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut duration = None;
        let mut segments = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if duration.is_none() {
                duration = Some(parse_header(line, line_no)?);
                continue;
            }
            segments.push(parse_segment(line, line_no)?);
        }
        let duration = duration.ok_or(Error::Parse {
            line: 1,
            msg: "missing `rtctrace v1` header".into(),
        })?;
        Self::new(segments, duration)
    }
}

fn parse_header(line: &str, line_no: usize) -> Result<u64> {
    let err = |msg: &str| Error::Parse {
        line: line_no,
        msg: msg.to_string(),
    };
    let mut parts = line.split_whitespace();
    if parts.next() != Some(HEADER_MAGIC) {
        return Err(err("expected header starting with `rtctrace`"));
    }
    match parts.next() {
        Some(HEADER_VERSION) => {}
        Some(v) => return Err(err(&format!("unsupported version `{v}`"))),
        None => return Err(err("missing version")),
    }
    let field = parts.next().ok_or_else(|| err("missing duration_ms field"))?;
    let value = field
        .strip_prefix("duration_ms=")
        .ok_or_else(|| err("expected `duration_ms=<int>`"))?;
    if parts.next().is_some() {
        return Err(err("trailing fields in header"));
    }
    value
        .parse::<u64>()
        .map_err(|e| err(&format!("field duration_ms: {e}")))
}

fn parse_segment(line: &str, line_no: usize) -> Result<Segment> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("expected 4 fields, found {}", fields.len()),
        });
    }
    let float = |i: usize, name: &str| -> Result<f64> {
        fields[i].parse::<f64>().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("field {name}: {e}"),
        })
    };
    let start_ms = fields[0].parse::<u64>().map_err(|e| Error::Parse {
        line: line_no,
        msg: format!("field start_ms: {e}"),
    })?;
    Ok(Segment {
        start_ms,
        params: LinkParams {
            capacity_kbps: float(1, "capacity_kbps")?,
            one_way_delay_ms: float(2, "owd_ms")?,
            loss_rate: float(3, "loss_rate")?,
        },
    })
}

/// Parameter ranges for the random trace generator.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceGenConfig {
    pub capacity_kbps: (f64, f64),
    pub delay_ms: (f64, f64),
    pub loss_rate: (f64, f64),
    pub segment_s: (f64, f64),
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for TraceGenConfig {
    fn default() -> Self {
        Self {
            capacity_kbps: (300.0, 8000.0),
            delay_ms: (10.0, 100.0),
            loss_rate: (0.0, 0.02),
            segment_s: (2.0, 15.0),
            duration_s: 60.0,
            seed: 0,
        }
    }
}

impl TraceGenConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, (lo, hi): (f64, f64)| -> Result<()> {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::validation(format!(
                    "{name} range ({lo}, {hi}) is empty"
                )));
            }
            Ok(())
        };
        check("capacity", self.capacity_kbps)?;
        check("delay", self.delay_ms)?;
        check("loss", self.loss_rate)?;
        check("segment duration", self.segment_s)?;
        if self.capacity_kbps.0 <= 0.0 {
            return Err(Error::validation("capacity range must be > 0"));
        }
        if self.delay_ms.0 < 0.0 {
            return Err(Error::validation("delay range must be >= 0"));
        }
        if self.loss_rate.0 < 0.0 || self.loss_rate.1 > 1.0 {
            return Err(Error::validation("loss range must lie in [0, 1]"));
        }
        if self.segment_s.0 < 0.001 {
            return Err(Error::validation("segment durations must be >= 1 ms"));
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 0.001) {
            return Err(Error::validation("trace duration must be >= 1 ms"));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draw a random trace. Capacity is log-uniform over its range; delay, loss
/// and segment durations are uniform.
pub fn sample_trace(cfg: &TraceGenConfig) -> Result<NetworkTrace> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let duration_ms = (cfg.duration_s * 1000.0).round() as u64;
    let (cap_lo, cap_hi) = cfg.capacity_kbps;
    let mut segments = Vec::new();
    let mut start_ms = 0u64;
    while start_ms < duration_ms {
        let log_cap = uniform(&mut rng, (cap_lo.ln(), cap_hi.ln()));
        let capacity_kbps = log_cap.exp().clamp(cap_lo, cap_hi);
        let params = LinkParams {
            capacity_kbps,
            one_way_delay_ms: uniform(&mut rng, cfg.delay_ms),
            loss_rate: uniform(&mut rng, cfg.loss_rate),
        };
        segments.push(Segment { start_ms, params });
        let len_ms = ((uniform(&mut rng, cfg.segment_s) * 1000.0).round() as u64).max(1);
        start_ms += len_ms;
    }
    NetworkTrace::new(segments, duration_ms)
}

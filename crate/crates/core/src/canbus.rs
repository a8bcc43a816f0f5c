//! In-vehicle CAN substrate: frame model, nominal traffic generation, and
//! priority arbitration on timestamp ties.
//!
//! Bandwidth is not modeled; an attack flood interleaves with benign frames
//! rather than displacing them, so detection keys on occupancy share and
//! inter-arrival statistics, not starvation.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_CAN_ID: u16 = 0x7FF;
pub const MAX_CAN_PAYLOAD: usize = 8;

/// One classic CAN frame. The 11-bit id doubles as the arbitration priority:
/// lower wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanFrame {
    pub id: u16,
    pub payload: Vec<u8>,
    pub timestamp_ms: f64,
}

impl CanFrame {
    pub fn new(id: u16, payload: Vec<u8>, timestamp_ms: f64) -> Result<Self, CanBusError> {
        if id > MAX_CAN_ID {
            return Err(CanBusError::IdOutOfRange(id));
        }
        if payload.len() > MAX_CAN_PAYLOAD {
            return Err(CanBusError::PayloadTooLong(payload.len()));
        }
        Ok(Self { id, payload, timestamp_ms })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    /// Frame index encoded little-endian into the first bytes.
    #[default]
    Counter,
    /// Seeded random bytes.
    Random,
    /// All-zero payload.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub id: u16,
    pub period_ms: f64,
    #[serde(default)]
    pub jitter_ms: f64,
    #[serde(default)]
    pub payload: PayloadKind,
    #[serde(default = "default_len")]
    pub payload_len: usize,
}

fn default_len() -> usize {
    8
}

/// The nominal periodic traffic description for one bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CanSchedule {
    pub entries: Vec<ScheduleEntry>,
}

impl CanSchedule {
    pub fn validate(&self) -> Result<(), CanBusError> {
        let mut ids: Vec<u16> = self.entries.iter().map(|e| e.id).collect();
        ids.sort_unstable();
        for w in ids.windows(2) {
            if w[0] == w[1] {
                return Err(CanBusError::DuplicateId(w[0]));
            }
        }
        for e in &self.entries {
            if e.id > MAX_CAN_ID {
                return Err(CanBusError::IdOutOfRange(e.id));
            }
            if !(e.period_ms > 0.0) {
                return Err(CanBusError::BadPeriod(e.id));
            }
            if e.jitter_ms < 0.0 || e.jitter_ms >= e.period_ms {
                return Err(CanBusError::BadJitter(e.id));
            }
            if e.payload_len > MAX_CAN_PAYLOAD {
                return Err(CanBusError::PayloadTooLong(e.payload_len));
            }
        }
        Ok(())
    }

    /// Shortest period in the schedule, the reference for DoS flood rates.
    pub fn fastest_period_ms(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.period_ms).min_by(f64::total_cmp)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CanBusError {
    #[error("CAN id {0:#05x} above 11-bit range")]
    IdOutOfRange(u16),
    #[error("payload length {0} above 8 bytes")]
    PayloadTooLong(usize),
    #[error("duplicate schedule id {0:#05x}")]
    DuplicateId(u16),
    #[error("non-positive period for id {0:#05x}")]
    BadPeriod(u16),
    #[error("jitter out of range for id {0:#05x}")]
    BadJitter(u16),
    #[error("CSV parse error on line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

fn make_payload(kind: PayloadKind, len: usize, index: u64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    match kind {
        PayloadKind::Counter => {
            let mut p = index.to_le_bytes().to_vec();
            p.truncate(len);
            p
        }
        PayloadKind::Random => (0..len).map(|_| rng.random()).collect(),
        PayloadKind::Constant => vec![0u8; len],
    }
}

/// Generates the benign frame stream for `duration_ms`, merged across ids and
/// sorted by `(timestamp, id)` so that simultaneous frames come out in
/// arbitration order.
pub fn generate_traffic(
    schedule: &CanSchedule,
    duration_ms: f64,
    seed: u64,
) -> Result<Vec<CanFrame>, CanBusError> {
    schedule.validate()?;
    let mut frames = Vec::new();
    for entry in &schedule.entries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xC0DE_0000 + entry.id as u64));
        let mut k = 0u64;
        loop {
            let nominal = (k + 1) as f64 * entry.period_ms;
            if nominal > duration_ms {
                break;
            }
            let jitter = if entry.jitter_ms > 0.0 {
                rng.random_range(-entry.jitter_ms..=entry.jitter_ms)
            } else {
                0.0
            };
            let t = (nominal + jitter).max(0.0);
            let payload = make_payload(entry.payload, entry.payload_len, k, &mut rng);
            frames.push(CanFrame { id: entry.id, payload, timestamp_ms: t });
            k += 1;
        }
    }
    sort_frames(&mut frames);
    Ok(frames)
}

/// Sorts by timestamp with lower id winning ties (bus arbitration).
pub fn sort_frames(frames: &mut [CanFrame]) {
    frames.sort_by(|a, b| {
        a.timestamp_ms.total_cmp(&b.timestamp_ms).then_with(|| a.id.cmp(&b.id))
    });
}

/// Serializes frames as `timestamp_ms,id_hex,payload_hex` lines.
pub fn to_csv(frames: &[CanFrame]) -> String {
    let mut out = String::from("timestamp_ms,id_hex,payload_hex\n");
    for f in frames {
        let hex: String = f.payload.iter().map(|b| format!("{b:02x}")).collect();
        out.push_str(&format!("{:.3},{:03x},{}\n", f.timestamp_ms, f.id, hex));
    }
    out
}

/// Parses the CSV trace format produced by [`to_csv`].
pub fn from_csv(text: &str) -> Result<Vec<CanFrame>, CanBusError> {
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.starts_with("timestamp_ms") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: &str| CanBusError::Csv { line: i + 1, reason: reason.into() };
        let mut parts = line.split(',');
        let ts: f64 = parts
            .next()
            .ok_or_else(|| err("missing timestamp"))?
            .trim()
            .parse()
            .map_err(|_| err("bad timestamp"))?;
        let id = u16::from_str_radix(parts.next().ok_or_else(|| err("missing id"))?.trim(), 16)
            .map_err(|_| err("bad id"))?;
        let hex = parts.next().ok_or_else(|| err("missing payload"))?.trim();
        if parts.next().is_some() {
            return Err(err("too many columns"));
        }
        if hex.len() % 2 != 0 {
            return Err(err("odd payload hex length"));
        }
        let payload: Result<Vec<u8>, _> =
            (0..hex.len() / 2).map(|j| u8::from_str_radix(&hex[2 * j..2 * j + 2], 16)).collect();
        let payload = payload.map_err(|_| err("bad payload hex"))?;
        frames.push(CanFrame::new(id, payload, ts).map_err(|e| err(&e.to_string()))?);
    }
    Ok(frames)
}

//! JSONL trace output: one header line, then one JSON object per event.
//! Event streams are byte-deterministic for a given fixture and seed.

use serde::{Deserialize, Serialize};

use crate::detection::DetectionReport;
use crate::messages::StationId;
use crate::mitigation::{ActionOutcome, MitigationKind};
use crate::trust::Verdict;

pub const TRACE_SCHEMA: &str = "v2x-sentinel-trace/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub fixture: String,
    pub scenario: String,
    pub seed: u64,
    pub step_ms: u64,
}

fn hex(bytes: &[u8; 32]) -> String {
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// One trace line. `step` is the simulation step index, `t_ms` the
/// simulation clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    /// A station handed a signed message to the broadcast bus.
    Tx {
        step: u64,
        t_ms: u64,
        station: StationId,
        msg_type: String,
        digest: String,
    },
    /// A station received and classified a message.
    Rx {
        step: u64,
        t_ms: u64,
        station: StationId,
        from: StationId,
        msg_type: String,
        digest: String,
        verify: Verdict,
    },
    /// The bus dropped a copy for one receiver.
    Drop {
        step: u64,
        t_ms: u64,
        station: StationId,
        from: StationId,
        digest: String,
    },
    /// A detector fired.
    Detection {
        step: u64,
        t_ms: u64,
        station: StationId,
        report: DetectionReport,
    },
    /// A mitigation action was issued.
    Mitigation {
        step: u64,
        t_ms: u64,
        station: StationId,
        action: MitigationKind,
        outcome: ActionOutcome,
        #[serde(skip_serializing_if = "Option::is_none")]
        detail: Option<String>,
    },
    /// Physical state snapshot of one actor.
    State {
        step: u64,
        t_ms: u64,
        station: StationId,
        x: f64,
        y: f64,
        speed: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        extra: Option<String>,
    },
}

impl TraceEvent {
    pub fn step(&self) -> u64 {
        match self {
            TraceEvent::Tx { step, .. }
            | TraceEvent::Rx { step, .. }
            | TraceEvent::Drop { step, .. }
            | TraceEvent::Detection { step, .. }
            | TraceEvent::Mitigation { step, .. }
            | TraceEvent::State { step, .. } => *step,
        }
    }

    pub fn kind_label(&self) -> &'static str {
        match self {
            TraceEvent::Tx { .. } => "tx",
            TraceEvent::Rx { .. } => "rx",
            TraceEvent::Drop { .. } => "drop",
            TraceEvent::Detection { .. } => "detection",
            TraceEvent::Mitigation { .. } => "mitigation",
            TraceEvent::State { .. } => "state",
        }
    }
}

pub fn digest_hex(d: &[u8; 32]) -> String {
    hex(d)
}

/// In-memory trace with JSONL rendering.
#[derive(Debug, Clone)]
pub struct Trace {
    pub header: TraceHeader,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new(header: TraceHeader) -> Self {
        Self { header, events: Vec::new() }
    }

    pub fn push(&mut self, event: TraceEvent) {
        self.events.push(event);
    }

    /// Serializes header plus events, one JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }

    /// Parses a JSONL trace produced by [`Trace::to_jsonl`].
    pub fn from_jsonl(text: &str) -> Result<Trace, TraceParseError> {
        let mut lines = text.lines();
        let header_line = lines.next().ok_or(TraceParseError::Empty)?;
        let header: TraceHeader =
            serde_json::from_str(header_line).map_err(|e| TraceParseError::Json(1, e.to_string()))?;
        if header.schema != TRACE_SCHEMA {
            return Err(TraceParseError::SchemaMismatch {
                found: header.schema,
                expected: TRACE_SCHEMA.to_string(),
            });
        }
        let mut events = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            events.push(
                serde_json::from_str(line)
                    .map_err(|e| TraceParseError::Json(i + 2, e.to_string()))?,
            );
        }
        Ok(Trace { header, events })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceParseError {
    #[error("empty trace file")]
    Empty,
    /// Trace written by an incompatible schema version.
    #[error("schema mismatch: found {found}, expected {expected}")]
    SchemaMismatch { found: String, expected: String },
    #[error("line {0}: {1}")]
    Json(usize, String),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> TraceHeader {
        TraceHeader {
            schema: TRACE_SCHEMA.to_string(),
            fixture: "clean".into(),
            scenario: "clean".into(),
            seed: 7,
            step_ms: 100,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let mut trace = Trace::new(header());
        trace.push(TraceEvent::Tx {
            step: 3,
            t_ms: 300,
            station: StationId(11),
            msg_type: "cam".into(),
            digest: "0011aabb00000000".into(),
        });
        trace.push(TraceEvent::State {
            step: 3,
            t_ms: 300,
            station: StationId(11),
            x: 1.5,
            y: -2.0,
            speed: 10.0,
            extra: None,
        });
        let text = trace.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        let parsed = Trace::from_jsonl(&text).unwrap();
        assert_eq!(parsed.header, trace.header);
        assert_eq!(parsed.events, trace.events);
    }

    #[test]
    fn schema_mismatch_rejected() {
        let mut h = header();
        h.schema = "v2x-sentinel-trace/0".into();
        let trace = Trace::new(h);
        assert!(matches!(
            Trace::from_jsonl(&trace.to_jsonl()),
            Err(TraceParseError::SchemaMismatch { .. })
        ));
    }
}

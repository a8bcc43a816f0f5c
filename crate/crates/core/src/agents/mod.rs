//! Behavioral state machines for the actors of the cooperative
//! intersection: connected vehicle OBU, RSU, traffic-light controller,
//! roadside camera, and UWB-tagged pedestrian.
//!
//! Agents interact only through the broadcast bus and the world's sensor
//! snapshots; each owns its mutable state and is ticked single-threaded in
//! ascending station-id order.

pub mod camera;
pub mod rsu;
pub mod track;
pub mod traffic_light;
pub mod vehicle;
pub mod vru;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{Anomaly, DetectionConfig, DetectionReport, Detector, Offender};
use crate::geom::Point;
use crate::messages::{KinematicState, ObjectClass, PerceivedObject, StationId};
use crate::mitigation::{MitigationPolicy, OverrideTarget};
use crate::trust::{SignedMessage, TrustAnchor};
use crate::world::bus::BusEvent;
use crate::world::trace::TraceEvent;

/// Ground-truth snapshot of one physical actor, fed only to sensor models
/// and the collision metric.
#[derive(Debug, Clone, Copy)]
pub struct TruthActor {
    pub station: StationId,
    pub class: ObjectClass,
    pub state: KinematicState,
    pub uwb_tag: Option<u32>,
}

/// One UWB ranging result for a tagged pedestrian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UwbFix {
    pub tag: u32,
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    pub t_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum UwbError {
    /// The tag is beyond the anchor's ranging envelope.
    #[error("tag {tag} out of range: {distance:.1} m > {max:.1} m")]
    OutOfRange { tag: u32, distance: f64, max: f64 },
}

/// Ranges one pedestrian from the anchor: true position plus seeded
/// zero-mean Gaussian noise of the configured sigma.
pub fn uwb_locate(
    anchor: Point,
    tag: u32,
    true_pos: Point,
    max_range: f64,
    sigma: f64,
    t_ms: u64,
    rng: &mut ChaCha8Rng,
) -> Result<UwbFix, UwbError> {
    let distance = anchor.dist(&true_pos);
    if distance > max_range {
        return Err(UwbError::OutOfRange { tag, distance, max: max_range });
    }
    let (nx, ny) = if sigma > 0.0 {
        let dist = rand_distr::Normal::new(0.0, sigma).expect("valid sigma");
        (rng.sample(dist), rng.sample(dist))
    } else {
        (0.0, 0.0)
    };
    Ok(UwbFix { tag, x: true_pos.x + nx, y: true_pos.y + ny, sigma, t_ms })
}

/// Deferred cross-agent effect, applied by the world after all ticks of the
/// step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Command {
    LightOverride { target: OverrideTarget, requested_by: StationId },
}

/// Everything an agent can see during its tick.
pub struct TickCtx<'a> {
    pub step: u64,
    pub t_ms: u64,
    pub inbox: Vec<BusEvent>,
    pub truth: &'a [TruthActor],
    pub anchor: &'a TrustAnchor,
    pub cfg: &'a DetectionConfig,
    pub policy: &'a MitigationPolicy,
    pub mitigation_enabled: bool,
    pub denm_repeat_steps: u64,
    pub denm_repeat_duration_ms: u64,
    /// This step's roadside camera output (consumed by the RSU).
    pub camera_objects: &'a [PerceivedObject],
    /// Ground-truth link from camera object ids to stations; read only by
    /// the attack injector, which owns the compromised sensor.
    pub camera_object_stations: &'a BTreeMap<u16, StationId>,
    /// This step's UWB fixes (consumed by the RSU).
    pub uwb_fixes: &'a [UwbFix],
}

/// What one tick produced.
#[derive(Default)]
pub struct TickOut {
    pub emissions: Vec<Arc<SignedMessage>>,
    pub events: Vec<TraceEvent>,
    pub commands: Vec<Command>,
}

/// One entry in a structured HMI log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmiEntry {
    pub t_ms: u64,
    pub text: String,
    /// Set when the platform is known compromised and the warning cannot
    /// influence behavior.
    pub ineffective: bool,
}

/// Suppresses repeated identical reports for a holdoff interval so sustained
/// conditions do not flood the trace.
#[derive(Debug, Clone, Default)]
pub struct ReportHoldoff {
    last: BTreeMap<(Detector, Anomaly, Offender), u64>,
}

impl ReportHoldoff {
    pub fn allow(&mut self, report: &DetectionReport, holdoff_ms: u64) -> bool {
        let key = (report.detector, report.anomaly, report.offender);
        match self.last.get(&key) {
            Some(&t) if report.sim_time_ms.saturating_sub(t) < holdoff_ms => false,
            _ => {
                self.last.insert(key, report.sim_time_ms);
                true
            }
        }
    }
}

/// Re-broadcast schedule for warning DENMs.
#[derive(Debug, Clone, Default)]
pub struct DenmScheduler {
    entries: Vec<RepeatEntry>,
}

#[derive(Debug, Clone)]
struct RepeatEntry {
    msg: Arc<SignedMessage>,
    next_step: u64,
    until_ms: u64,
    every_steps: u64,
}

impl DenmScheduler {
    pub fn schedule(
        &mut self,
        msg: Arc<SignedMessage>,
        now_step: u64,
        every_steps: u64,
        until_ms: u64,
    ) {
        self.entries.push(RepeatEntry {
            msg,
            next_step: now_step + every_steps,
            until_ms,
            every_steps,
        });
    }

    /// Repeats due at `step`; expired entries are dropped.
    pub fn due(&mut self, step: u64, t_ms: u64) -> Vec<Arc<SignedMessage>> {
        let mut out = Vec::new();
        self.entries.retain_mut(|e| {
            if t_ms > e.until_ms {
                return false;
            }
            if step >= e.next_step {
                out.push(Arc::clone(&e.msg));
                e.next_step = step + e.every_steps;
            }
            true
        });
        out
    }
}

pub(crate) fn offender_position_hint(
    offender: Offender,
    cam_positions: &BTreeMap<StationId, (f64, f64)>,
) -> (f64, f64) {
    match offender {
        Offender::Station(s) => cam_positions.get(&s).copied().unwrap_or((0.0, 0.0)),
        _ => (0.0, 0.0),
    }
}

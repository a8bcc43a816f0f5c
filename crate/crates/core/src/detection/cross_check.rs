//! Cross-checks between received object claims and local sensing.
//!
//! Three anomaly classes over CAM/CPM streams:
//! - position usurpation: two distinct station identities advertising the
//!   same spot that local sensors confirm is occupied once,
//! - ghost: an advertised position inside the local field of view where the
//!   local sensors see nothing,
//! - hijacked vehicle: a locally-sensed vehicle missing from a remote
//!   perception message whose declared field of view covers it.
//!
//! Each condition must hold for `window_k` consecutive evaluations before a
//! report is emitted; a step where it does not hold resets the run.

use std::collections::BTreeMap;

use crate::messages::{FieldOfView, ObjectClass, PerceivedObject, StationId};

use super::{Anomaly, DetectionConfig, DetectionReport, Detector, Offender};

/// A station's self-advertised position from its CAM.
#[derive(Debug, Clone, Copy)]
pub struct CamClaim {
    pub station: StationId,
    pub x: f64,
    pub y: f64,
    pub digest: [u8; 32],
}

/// One received CPM, reduced to what the cross-check needs.
#[derive(Debug, Clone)]
pub struct CpmView {
    pub sender: StationId,
    pub fov: FieldOfView,
    pub objects: Vec<(u16, f64, f64, ObjectClass)>,
    pub digest: [u8; 32],
}

/// A station does not sense itself; advertised positions this close to the
/// ego position are exempt from the ghost check.
const EGO_EXCLUSION_M: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum ClaimKey {
    Station(StationId),
    CpmObject(StationId, u16),
}

#[derive(Debug, Clone, Default)]
pub struct CrossChecker {
    ghost_runs: BTreeMap<ClaimKey, u32>,
    hijack_runs: BTreeMap<(StationId, u16), u32>,
    dup_runs: BTreeMap<(StationId, StationId), u32>,
}

impl CrossChecker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Evaluates one step's received claims against this step's local sensor
    /// picture. The result set is independent of input ordering.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        &mut self,
        cams: &[CamClaim],
        cpms: &[CpmView],
        local_objects: &[PerceivedObject],
        local_fov: &FieldOfView,
        ego_pos: (f64, f64),
        cfg: &DetectionConfig,
        sim_time_ms: u64,
    ) -> Vec<DetectionReport> {
        let mut reports = Vec::new();

        let near_local = |x: f64, y: f64, gate: f64| {
            local_objects.iter().any(|o| (o.state.x - x).hypot(o.state.y - y) <= gate)
        };

        // Ghost: advertised positions (CAM self-claims and CPM objects) in
        // view with no local counterpart.
        let mut ghost_next: BTreeMap<ClaimKey, u32> = BTreeMap::new();
        let mut ghost_candidates: Vec<(ClaimKey, StationId, [u8; 32])> = Vec::new();
        for c in cams {
            ghost_candidates.push((ClaimKey::Station(c.station), c.station, c.digest));
        }
        for v in cpms {
            for (oid, _, _, _) in &v.objects {
                ghost_candidates.push((ClaimKey::CpmObject(v.sender, *oid), v.sender, v.digest));
            }
        }
        for (key, sender, digest) in ghost_candidates {
            let (x, y) = match key {
                ClaimKey::Station(s) => {
                    let c = cams.iter().find(|c| c.station == s).unwrap();
                    (c.x, c.y)
                }
                ClaimKey::CpmObject(s, oid) => {
                    let v = cpms.iter().find(|v| v.sender == s).unwrap();
                    let o = v.objects.iter().find(|o| o.0 == oid).unwrap();
                    (o.1, o.2)
                }
            };
            let ego_dist = (x - ego_pos.0).hypot(y - ego_pos.1);
            if !local_fov.contains(x, y) || ego_dist <= EGO_EXCLUSION_M {
                continue;
            }
            if !near_local(x, y, cfg.r_assoc) {
                let run = self.ghost_runs.get(&key).copied().unwrap_or(0) + 1;
                ghost_next.insert(key, run);
                if run == cfg.window_k {
                    reports.push(DetectionReport {
                        detector: Detector::CrossCheck,
                        anomaly: Anomaly::Ghost,
                        offender: Offender::Station(sender),
                        evidence: vec![digest],
                        tracks: None,
                        source: None,
                        ttc_ms: None,
                        sim_time_ms,
                    });
                }
            }
        }
        self.ghost_runs = ghost_next;

        // Hijacked vehicle: a locally-sensed vehicle absent from a remote
        // CPM that claims to cover its position.
        let mut hijack_next: BTreeMap<(StationId, u16), u32> = BTreeMap::new();
        for local in local_objects {
            if local.class != ObjectClass::Vehicle {
                continue;
            }
            for v in cpms {
                if !v.fov.contains(local.state.x, local.state.y) {
                    continue;
                }
                let covered = v.objects.iter().any(|(_, x, y, _)| {
                    (x - local.state.x).hypot(y - local.state.y) <= cfg.r_assoc
                });
                if !covered {
                    let key = (v.sender, local.object_id);
                    let run = self.hijack_runs.get(&key).copied().unwrap_or(0) + 1;
                    hijack_next.insert(key, run);
                    if run == cfg.window_k {
                        reports.push(DetectionReport {
                            detector: Detector::CrossCheck,
                            anomaly: Anomaly::HijackedVehicle,
                            offender: Offender::Station(v.sender),
                            evidence: vec![v.digest],
                            tracks: None,
                            source: None,
                            ttc_ms: None,
                            sim_time_ms,
                        });
                    }
                }
            }
        }
        self.hijack_runs = hijack_next;

        // Position usurpation: two station identities on one confirmed spot.
        let mut dup_next: BTreeMap<(StationId, StationId), u32> = BTreeMap::new();
        for (i, a) in cams.iter().enumerate() {
            for b in cams.iter().skip(i + 1) {
                if a.station == b.station {
                    continue;
                }
                let dist = (a.x - b.x).hypot(a.y - b.y);
                if dist > cfg.r_dup {
                    continue;
                }
                let confirmed =
                    near_local(a.x, a.y, cfg.r_assoc) || near_local(b.x, b.y, cfg.r_assoc);
                if confirmed {
                    let key = if a.station < b.station {
                        (a.station, b.station)
                    } else {
                        (b.station, a.station)
                    };
                    let run = self.dup_runs.get(&key).copied().unwrap_or(0) + 1;
                    dup_next.insert(key, run);
                    if run == cfg.window_k {
                        reports.push(DetectionReport {
                            detector: Detector::CrossCheck,
                            anomaly: Anomaly::PositionUsurpation,
                            // Blame the higher pseudonym id; the pair is in
                            // the evidence either way.
                            offender: Offender::Station(key.1),
                            evidence: vec![a.digest, b.digest],
                            tracks: None,
                            source: None,
                            ttc_ms: None,
                            sim_time_ms,
                        });
                    }
                }
            }
        }
        self.dup_runs = dup_next;

        reports.sort_by(|a, b| (a.anomaly, a.offender).cmp(&(b.anomaly, b.offender)));
        reports
    }
}

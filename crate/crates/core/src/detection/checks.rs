//! Message-level detectors: local security checks, payload plausibility, and
//! stream consistency between successive reports from one sender.

use std::collections::BTreeMap;

use crate::messages::{CamPayload, CpmPayload, KinematicState, Payload, StationId, REGION_BOUND};
use crate::trust::{self, SignedMessage, TrustAnchor, Verdict};

use super::{Anomaly, DetectionConfig, DetectionReport, Detector, Offender};

/// First-level security check: wraps chain/signature/permission validation.
/// Non-accepting envelopes yield a `badSignature` report.
pub fn check_security(
    msg: &SignedMessage,
    anchor: &TrustAnchor,
    sim_time_ms: u64,
) -> (Verdict, Option<DetectionReport>) {
    let verdict = trust::verify(msg, anchor);
    let report = (verdict != Verdict::Accept).then(|| DetectionReport {
        detector: Detector::Security,
        anomaly: Anomaly::BadSignature,
        offender: Offender::Station(msg.sender()),
        evidence: vec![msg.digest()],
        tracks: None,
        source: None,
        ttc_ms: None,
        sim_time_ms,
    });
    (verdict, report)
}

fn implausible_state(state: &KinematicState, cfg: &DetectionConfig) -> bool {
    state.speed > cfg.max_plausible_speed
        || state.accel.abs() > cfg.max_plausible_accel
        || state.x.abs() > REGION_BOUND
        || state.y.abs() > REGION_BOUND
}

/// Payload-implausibility check on CAM and CPM content. Assumes the message
/// already passed the security level.
pub fn check_plausibility(
    payload: &Payload,
    digest: [u8; 32],
    cfg: &DetectionConfig,
    sim_time_ms: u64,
) -> Option<DetectionReport> {
    let implausible = match payload {
        Payload::Cam(cam) => implausible_state(&cam.state, cfg),
        Payload::Cpm(cpm) => cpm.objects.iter().any(|o| {
            implausible_state(&o.state, cfg)
                || !cpm.sensor_fov.contains(o.state.x, o.state.y)
        }),
        _ => false,
    };
    implausible.then(|| DetectionReport {
        detector: Detector::Plausibility,
        anomaly: Anomaly::ImplausiblePayload,
        offender: Offender::Station(payload.sender()),
        evidence: vec![digest],
        tracks: None,
        source: None,
        ttc_ms: None,
        sim_time_ms,
    })
}

/// Detects inconsistencies between successive CAM reports of one sender:
/// prediction residual beyond a speed-scaled gate, teleportation, and
/// non-monotone generation times.
#[derive(Debug, Clone, Default)]
pub struct ConsistencyTracker {
    last: BTreeMap<StationId, CamPayload>,
}

const TELEPORT_M: f64 = 50.0;

impl ConsistencyTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn check(&mut self, cam: &CamPayload, digest: [u8; 32]) -> Option<DetectionReport> {
        let prev = self.last.insert(cam.sender, *cam);
        let prev = prev?;

        let report = |anomaly| {
            Some(DetectionReport {
                detector: Detector::Consistency,
                anomaly,
                offender: Offender::Station(cam.sender),
                evidence: vec![digest],
                tracks: None,
                source: None,
                ttc_ms: None,
                sim_time_ms: cam.gen_time_ms,
            })
        };

        if cam.gen_time_ms < prev.gen_time_ms {
            return report(Anomaly::InconsistentStream);
        }
        let dt = (cam.gen_time_ms - prev.gen_time_ms) as f64 / 1000.0;
        let (vx, vy) = prev.state.velocity();
        let cos = prev.state.heading.cos();
        let sin = prev.state.heading.sin();
        let pred_x = prev.state.x + vx * dt + 0.5 * prev.state.accel * cos * dt * dt;
        let pred_y = prev.state.y + vy * dt + 0.5 * prev.state.accel * sin * dt * dt;
        let residual = (cam.state.x - pred_x).hypot(cam.state.y - pred_y);
        let jump = (cam.state.x - prev.state.x).hypot(cam.state.y - prev.state.y);

        let gate = 0.5 + 0.5 * dt * prev.state.speed * 0.2;
        if jump > TELEPORT_M || residual > gate {
            return report(Anomaly::InconsistentStream);
        }
        None
    }
}

/// Convenience wrapper matching the CPM plausibility signature for object
/// streams already unpacked by an agent.
pub fn cpm_objects_plausible(cpm: &CpmPayload, cfg: &DetectionConfig) -> bool {
    cpm.objects
        .iter()
        .all(|o| !implausible_state(&o.state, cfg) && cpm.sensor_fov.contains(o.state.x, o.state.y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::TAU;
    use crate::messages::{encode, FieldOfView, ObjectClass, PerceivedObject};
    use crate::trust::{PermissionSet, Pki};

    fn cam(sender: u32, x: f64, y: f64, heading: f64, speed: f64, t: u64) -> CamPayload {
        CamPayload {
            sender: StationId(sender),
            state: KinematicState::new(x, y, heading, speed, 0.0),
            gen_time_ms: t,
        }
    }

    #[test]
    fn security_check_mirrors_verify() {
        let pki = Pki::new(1);
        let anchor = pki.anchor();
        let hsm = pki.issue_station(StationId(5), PermissionSet::SEND_CAM);
        let bytes = encode(&Payload::Cam(cam(5, 0.0, 0.0, 0.0, 10.0, 0))).unwrap();
        let msg = hsm.sign(&bytes).unwrap();

        let (verdict, report) = check_security(&msg, &anchor, 100);
        assert_eq!(verdict, Verdict::Accept);
        assert!(report.is_none());

        let mut tampered = msg.clone();
        tampered.payload_bytes[10] ^= 1;
        let (verdict, report) = check_security(&tampered, &anchor, 100);
        assert_ne!(verdict, Verdict::Accept);
        let report = report.unwrap();
        assert_eq!(report.anomaly, Anomaly::BadSignature);
        assert_eq!(report.evidence.len(), 1);

        // Wrong-permission SPaT also lands as a security report with
        // evidence attached.
        let spat = encode(&Payload::Spat(crate::messages::SpatPayload {
            sender: StationId(5),
            phases: vec![],
            gen_time_ms: 0,
        }))
        .unwrap();
        let (verdict, report) = check_security(&hsm.sign(&spat).unwrap(), &anchor, 100);
        assert_eq!(verdict, Verdict::PermissionDenied);
        assert!(report.unwrap().is_well_formed());
    }

    #[test]
    fn plausibility_flags_extreme_speed() {
        let cfg = DetectionConfig::default();
        let p = Payload::Cam(cam(5, 0.0, 0.0, 0.0, 80.0, 0));
        let r = check_plausibility(&p, [1; 32], &cfg, 0).unwrap();
        assert_eq!(r.anomaly, Anomaly::ImplausiblePayload);
    }

    #[test]
    fn plausibility_accepts_nominal_urban_cam() {
        let cfg = DetectionConfig::default();
        let p = Payload::Cam(cam(5, 10.0, -3.0, 1.0, 13.9, 0));
        assert!(check_plausibility(&p, [1; 32], &cfg, 0).is_none());
    }

    #[test]
    fn plausibility_flags_object_outside_declared_fov() {
        // Declared range 50 m, object 10 m beyond it. Built by hand since
        // the codec itself would refuse to encode this.
        let cfg = DetectionConfig::default();
        let p = Payload::Cpm(CpmPayload {
            sender: StationId(3),
            sensor_fov: FieldOfView {
                origin_x: 0.0,
                origin_y: 0.0,
                orientation: 0.0,
                range: 50.0,
                half_angle: 1.0,
            },
            objects: vec![PerceivedObject {
                object_id: 1,
                state: KinematicState::new(60.0, 0.0, 0.0, 5.0, 0.0),
                confidence: 0.9,
                class: ObjectClass::Vehicle,
            }],
            gen_time_ms: 0,
        });
        let r = check_plausibility(&p, [2; 32], &cfg, 0).unwrap();
        assert_eq!(r.anomaly, Anomaly::ImplausiblePayload);
    }

    #[test]
    fn consistency_accepts_smooth_stream() {
        let mut tracker = ConsistencyTracker::new();
        // 10 m/s heading east, perfectly integrated.
        for k in 0..20u64 {
            let c = cam(7, k as f64, 0.0, 0.0, 10.0, k * 100);
            assert!(tracker.check(&c, [k as u8; 32]).is_none(), "step {k}");
        }
    }

    #[test]
    fn consistency_flags_teleport() {
        let mut tracker = ConsistencyTracker::new();
        assert!(tracker.check(&cam(7, 0.0, 0.0, 0.0, 10.0, 0), [0; 32]).is_none());
        let r = tracker.check(&cam(7, 100.0, 0.0, 0.0, 10.0, 100), [1; 32]).unwrap();
        assert_eq!(r.anomaly, Anomaly::InconsistentStream);
    }

    #[test]
    fn consistency_flags_non_monotone_gen_time() {
        let mut tracker = ConsistencyTracker::new();
        assert!(tracker.check(&cam(7, 0.0, 0.0, 0.0, 10.0, 1000), [0; 32]).is_none());
        let r = tracker.check(&cam(7, 1.0, 0.0, 0.0, 10.0, 900), [1; 32]).unwrap();
        assert_eq!(r.anomaly, Anomaly::InconsistentStream);
    }

    #[test]
    fn consistency_gate_scales_with_speed() {
        let mut tracker = ConsistencyTracker::new();
        // At 10 m/s the gate over 100 ms is 0.5 + 0.1*0.1*10*... = 0.6 m;
        // a 0.55 m lateral residual passes, 0.8 m does not.
        assert!(tracker.check(&cam(7, 0.0, 0.0, 0.0, 10.0, 0), [0; 32]).is_none());
        assert!(tracker.check(&cam(7, 1.0, 0.55, 0.0, 10.0, 100), [1; 32]).is_none());
        let mut tracker2 = ConsistencyTracker::new();
        assert!(tracker2.check(&cam(7, 0.0, 0.0, 0.0, 10.0, 0), [0; 32]).is_none());
        assert!(tracker2.check(&cam(7, 1.0, 0.8, 0.0, 10.0, 100), [1; 32]).is_some());
    }

    #[test]
    fn fabricated_stop_profile_passes_consistency() {
        // A kinematically consistent deceleration stream must not trip the
        // intra-stream check: cross-sensor detection is required for that.
        let mut tracker = ConsistencyTracker::new();
        let mut x = 0.0f64;
        let mut v = 10.0f64;
        let a = -3.0f64;
        let dt = 0.1;
        for k in 0..30u64 {
            let payload = CamPayload {
                sender: StationId(9),
                state: KinematicState::new(x, 0.0, 0.0, v, if v > 0.0 { a } else { 0.0 }),
                gen_time_ms: k * 100,
            };
            assert!(tracker.check(&payload, [k as u8; 32]).is_none(), "step {k}");
            let step_a = if v > 0.0 { a } else { 0.0 };
            x += v * dt + 0.5 * step_a * dt * dt;
            v = (v + step_a * dt).max(0.0);
        }
    }

    #[test]
    fn heading_wrap_consistency() {
        // Driving west (heading pi), the prediction must wrap correctly.
        let mut tracker = ConsistencyTracker::new();
        let h = TAU / 2.0;
        assert!(tracker.check(&cam(7, 0.0, 0.0, h, 10.0, 0), [0; 32]).is_none());
        assert!(tracker.check(&cam(7, -1.0, 0.0, h, 10.0, 100), [1; 32]).is_none());
    }
}

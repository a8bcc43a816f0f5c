//! Roadside unit: wraps camera perception into CPMs, runs the RSU-side
//! detector bank (message checks, cross-checks, SPaT validity, reported-vs-
//! perceived deviation, pedestrian collision prediction), forwards warnings,
//! and drives mitigation (DENM broadcasts, light-override requests).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::attacks::AttackRuntime;
use crate::detection::checks::{check_plausibility, check_security, ConsistencyTracker};
use crate::detection::collision::{CollisionPredictor, TrackState};
use crate::detection::cross_check::{CamClaim, CpmView, CrossChecker};
use crate::detection::deviation::StopLieDetector;
use crate::detection::spat::SpatChecker;
use crate::detection::{
    DetectionReport, MeasurementSource, TrackRef,
};
use crate::geom::{wrap_angle, Point, Polyline};
use crate::messages::{
    decode, encode, CpmPayload, DenmCause, DenmPayload, FieldOfView, KinematicState, ObjectClass,
    Payload, StationId,
};
use crate::mitigation::{denm_cause_for, route, ActionOutcome, AgentContext, MitigationKind};
use crate::trust::{Hsm, SignedMessage, Verdict};
use crate::world::conflict::{build_conflict_matrix, ConflictMatrix};
use crate::world::trace::{digest_hex, TraceEvent};

use super::track::Track;
use super::{Command, DenmScheduler, HmiEntry, ReportHoldoff, TickCtx, TickOut};

/// Gate for sticking a CAM station to a camera object, meters.
const CAM_ASSOC_GATE: f64 = 3.0;
/// Velocity-estimate windows (samples).
const VRU_VELOCITY_WINDOW: usize = 15;
const THREAT_VELOCITY_WINDOW: usize = 8;
/// A pedestrian warning concerns events closer than this, meters.
pub const VRU_WARNING_RADIUS: f64 = 15.0;

/// Builds and signs a warning DENM. Returns `None` when the HSM is purged.
pub(crate) fn build_denm(
    hsm: &Hsm,
    sender: StationId,
    cause: DenmCause,
    event_pos: (f64, f64),
    offender: StationId,
    evidence: [u8; 32],
    t_ms: u64,
) -> Option<Arc<SignedMessage>> {
    let payload = Payload::Denm(DenmPayload {
        sender,
        cause,
        event_state: KinematicState::new(
            event_pos.0.clamp(-499.0, 499.0),
            event_pos.1.clamp(-499.0, 499.0),
            0.0,
            0.0,
            0.0,
        ),
        offender,
        evidence_digest: evidence,
        gen_time_ms: t_ms,
    });
    let bytes = encode(&payload).ok()?;
    hsm.sign(&bytes).ok().map(Arc::new)
}

/// Sorted processing priority per payload type: topology first.
fn type_priority(tag: u8) -> u8 {
    match tag {
        crate::messages::TAG_MAP => 0,
        crate::messages::TAG_SPAT => 1,
        crate::messages::TAG_CAM => 2,
        crate::messages::TAG_CPM => 3,
        crate::messages::TAG_DENM => 4,
        _ => 5,
    }
}

pub struct RsuAgent {
    pub station: StationId,
    hsm: Hsm,
    pub position: Point,
    camera_fov: FieldOfView,
    camera_sigma: f64,
    consistency: ConsistencyTracker,
    cross: CrossChecker,
    stop_lie: StopLieDetector,
    spat: SpatChecker,
    conflict: Option<ConflictMatrix>,
    conflict_geometry: BTreeMap<u16, Polyline>,
    cam_tracks: BTreeMap<StationId, Track>,
    cam_digests: BTreeMap<StationId, [u8; 32]>,
    perceived_tracks: BTreeMap<u16, Track>,
    perceived_class: BTreeMap<u16, ObjectClass>,
    uwb_tracks: BTreeMap<u32, Track>,
    /// Sticky CAM-station to camera-object association.
    assoc: BTreeMap<StationId, u16>,
    collision: CollisionPredictor,
    denms: DenmScheduler,
    holdoff: ReportHoldoff,
    forwarded: BTreeSet<[u8; 32]>,
    pub hmi: Vec<HmiEntry>,
}

impl RsuAgent {
    pub fn new(
        station: StationId,
        hsm: Hsm,
        position: Point,
        camera_fov: FieldOfView,
        camera_sigma: f64,
        conflict_geometry: BTreeMap<u16, Polyline>,
    ) -> Self {
        Self {
            station,
            hsm,
            position,
            camera_fov,
            camera_sigma,
            consistency: ConsistencyTracker::new(),
            cross: CrossChecker::new(),
            stop_lie: StopLieDetector::new(),
            spat: SpatChecker::new(),
            conflict: None,
            conflict_geometry,
            cam_tracks: BTreeMap::new(),
            cam_digests: BTreeMap::new(),
            perceived_tracks: BTreeMap::new(),
            perceived_class: BTreeMap::new(),
            uwb_tracks: BTreeMap::new(),
            assoc: BTreeMap::new(),
            collision: CollisionPredictor::new(),
            denms: DenmScheduler::default(),
            holdoff: ReportHoldoff::default(),
            forwarded: BTreeSet::new(),
            hmi: Vec::new(),
        }
    }

    pub fn conflict_matrix(&self) -> Option<&ConflictMatrix> {
        self.conflict.as_ref()
    }

    fn note(&mut self, t_ms: u64, text: impl Into<String>) {
        self.hmi.push(HmiEntry { t_ms, text: text.into(), ineffective: false });
    }

    /// Executes mitigation for one report: warning DENM, light override
    /// request, local HMI entry.
    fn execute_report(
        &mut self,
        report: DetectionReport,
        ctx: &TickCtx,
        out: &mut TickOut,
    ) {
        out.events.push(TraceEvent::Detection {
            step: ctx.step,
            t_ms: ctx.t_ms,
            station: self.station,
            report: report.clone(),
        });
        if !ctx.mitigation_enabled {
            return;
        }
        let actions = match route(&report, ctx.policy, AgentContext::Rsu) {
            Ok(a) => a,
            Err(_) => return,
        };
        let cam_positions: BTreeMap<StationId, (f64, f64)> = self
            .cam_tracks
            .iter()
            .filter_map(|(s, t)| t.latest().map(|&(_, st)| (*s, (st.x, st.y))))
            .collect();
        for action in actions {
            match action {
                MitigationKind::BroadcastDenm => {
                    let cause = denm_cause_for(&report);
                    let event_pos =
                        super::offender_position_hint(report.offender, &cam_positions);
                    let evidence = report.evidence.first().copied().unwrap_or([0u8; 32]);
                    if let Some(msg) = build_denm(
                        &self.hsm,
                        self.station,
                        cause,
                        event_pos,
                        report.offender.station(),
                        evidence,
                        ctx.t_ms,
                    ) {
                        out.events.push(TraceEvent::Mitigation {
                            step: ctx.step,
                            t_ms: ctx.t_ms,
                            station: self.station,
                            action,
                            outcome: ActionOutcome::Delivered,
                            detail: Some(cause.label().to_string()),
                        });
                        out.events.push(TraceEvent::Tx {
                            step: ctx.step,
                            t_ms: ctx.t_ms,
                            station: self.station,
                            msg_type: "denm".into(),
                            digest: digest_hex(&msg.digest()),
                        });
                        self.denms.schedule(
                            Arc::clone(&msg),
                            ctx.step,
                            ctx.denm_repeat_steps,
                            ctx.t_ms + ctx.denm_repeat_duration_ms,
                        );
                        out.emissions.push(msg);
                    }
                }
                MitigationKind::RequestLightOverride(target) => {
                    out.commands.push(Command::LightOverride {
                        target,
                        requested_by: self.station,
                    });
                }
                MitigationKind::HmiNotify => {
                    // For collision warnings the notification rides a DENM
                    // to the handheld; everything lands on the RSU HMI too.
                    if report.anomaly == crate::detection::Anomaly::ImminentCollision {
                        let event_pos = report
                            .tracks
                            .and_then(|(vru, _)| match vru {
                                TrackRef::UwbTag(tag) => self
                                    .uwb_tracks
                                    .get(&tag)
                                    .and_then(|t| t.latest())
                                    .map(|&(_, s)| (s.x, s.y)),
                                _ => None,
                            })
                            .unwrap_or((0.0, 0.0));
                        if let Some(msg) = build_denm(
                            &self.hsm,
                            self.station,
                            DenmCause::VruCollision,
                            event_pos,
                            report.offender.station(),
                            [0u8; 32],
                            ctx.t_ms,
                        ) {
                            out.events.push(TraceEvent::Mitigation {
                                step: ctx.step,
                                t_ms: ctx.t_ms,
                                station: self.station,
                                action,
                                outcome: ActionOutcome::Pending,
                                detail: Some("vru_warning".into()),
                            });
                            out.events.push(TraceEvent::Tx {
                                step: ctx.step,
                                t_ms: ctx.t_ms,
                                station: self.station,
                                msg_type: "denm".into(),
                                digest: digest_hex(&msg.digest()),
                            });
                            self.denms.schedule(
                                Arc::clone(&msg),
                                ctx.step,
                                ctx.denm_repeat_steps,
                                ctx.t_ms + ctx.denm_repeat_duration_ms,
                            );
                            out.emissions.push(msg);
                        }
                    } else {
                        out.events.push(TraceEvent::Mitigation {
                            step: ctx.step,
                            t_ms: ctx.t_ms,
                            station: self.station,
                            action,
                            outcome: ActionOutcome::Delivered,
                            detail: None,
                        });
                    }
                    self.note(
                        ctx.t_ms,
                        format!("{}: {}", report.detector.label(), report.anomaly.label()),
                    );
                }
                MitigationKind::PurgeOwnKeys => {}
            }
        }
    }

    pub fn tick(&mut self, ctx: &TickCtx, attack: &mut AttackRuntime) -> TickOut {
        let mut out = TickOut::default();
        let mut reports: Vec<DetectionReport> = Vec::new();
        let mut cam_claims: Vec<CamClaim> = Vec::new();
        let mut cpm_views: Vec<CpmView> = Vec::new();
        let mut to_forward: Vec<Arc<SignedMessage>> = Vec::new();

        // Inbox, topology-first.
        let mut inbox = ctx.inbox.clone();
        inbox.sort_by_key(|e| {
            (type_priority(e.msg.payload_bytes.first().copied().unwrap_or(0xFF)), e.sender, e.seq)
        });
        for event in &inbox {
            let msg = &event.msg;
            let digest = msg.digest();
            let (verdict, security_report) = check_security(msg, ctx.anchor, ctx.t_ms);
            let payload = decode(&msg.payload_bytes).ok();
            out.events.push(TraceEvent::Rx {
                step: ctx.step,
                t_ms: ctx.t_ms,
                station: self.station,
                from: event.sender,
                msg_type: payload
                    .as_ref()
                    .map(|p| p.kind_label().to_string())
                    .unwrap_or_else(|| "unknown".into()),
                digest: digest_hex(&digest),
                verify: verdict,
            });
            if let Some(r) = security_report {
                reports.push(r);
                continue;
            }
            if verdict != Verdict::Accept {
                continue;
            }
            let Some(payload) = payload else { continue };
            if let Some(r) = check_plausibility(&payload, digest, ctx.cfg, ctx.t_ms) {
                reports.push(r);
                continue;
            }
            match payload {
                Payload::Map(map) => {
                    if self.conflict.is_none() {
                        match build_conflict_matrix(&map, &self.conflict_geometry) {
                            Ok(cm) => self.conflict = Some(cm),
                            Err(e) => self.note(ctx.t_ms, format!("MAP rejected: {e}")),
                        }
                    }
                }
                Payload::Spat(spat) => {
                    if let Some(cm) = &self.conflict {
                        match self.spat.check(&spat, digest, cm) {
                            Ok(Some(r)) => reports.push(r),
                            Ok(None) => {}
                            Err(e) => self.note(ctx.t_ms, format!("SPaT check failed: {e}")),
                        }
                    }
                }
                Payload::Cam(cam) => {
                    if let Some(r) = self.consistency.check(&cam, digest) {
                        reports.push(r);
                    }
                    self.cam_tracks
                        .entry(cam.sender)
                        .or_insert_with(|| {
                            Track::new(TrackRef::Station(cam.sender), MeasurementSource::Cam)
                        })
                        .push(cam.gen_time_ms, cam.state);
                    self.cam_digests.insert(cam.sender, digest);
                    cam_claims.push(CamClaim {
                        station: cam.sender,
                        x: cam.state.x,
                        y: cam.state.y,
                        digest,
                    });
                }
                Payload::Cpm(cpm) => {
                    cpm_views.push(CpmView {
                        sender: cpm.sender,
                        fov: cpm.sensor_fov,
                        objects: cpm
                            .objects
                            .iter()
                            .map(|o| (o.object_id, o.state.x, o.state.y, o.class))
                            .collect(),
                        digest,
                    });
                }
                Payload::Denm(denm) => {
                    self.note(
                        ctx.t_ms,
                        format!(
                            "DENM {} offender={} from {}",
                            denm.cause.label(),
                            denm.offender,
                            denm.sender
                        ),
                    );
                    if denm.sender != self.station && self.forwarded.insert(digest) {
                        to_forward.push(Arc::clone(msg));
                    }
                }
            }
        }

        // Perception bookkeeping.
        for obj in ctx.camera_objects {
            self.perceived_tracks
                .entry(obj.object_id)
                .or_insert_with(|| {
                    Track::new(TrackRef::LocalObject(obj.object_id), MeasurementSource::Cam)
                })
                .push(ctx.t_ms, obj.state);
            self.perceived_class.insert(obj.object_id, obj.class);
        }
        for fix in ctx.uwb_fixes {
            self.uwb_tracks
                .entry(fix.tag)
                .or_insert_with(|| Track::new(TrackRef::UwbTag(fix.tag), MeasurementSource::Uwb))
                .push(fix.t_ms, KinematicState::new(fix.x, fix.y, 0.0, 0.0, 0.0));
        }

        // Associate CAM stations with camera objects (sticky nearest).
        for claim in &cam_claims {
            if self.assoc.contains_key(&claim.station) {
                continue;
            }
            let nearest = ctx
                .camera_objects
                .iter()
                .map(|o| {
                    let d = (o.state.x - claim.x).hypot(o.state.y - claim.y);
                    (o.object_id, d)
                })
                .filter(|(_, d)| *d <= CAM_ASSOC_GATE)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((oid, _)) = nearest {
                self.assoc.insert(claim.station, oid);
            }
        }

        // Reported-vs-perceived deviation per associated pair.
        let assoc_pairs: Vec<(StationId, u16)> =
            self.assoc.iter().map(|(s, o)| (*s, *o)).collect();
        for (station, object_id) in assoc_pairs {
            let (Some(cam_track), Some(perc_track)) =
                (self.cam_tracks.get(&station), self.perceived_tracks.get(&object_id))
            else {
                continue;
            };
            let digest = self.cam_digests.get(&station).copied().unwrap_or([0u8; 32]);
            if let Some(r) = self.stop_lie.check(
                station,
                cam_track,
                perc_track,
                digest,
                self.camera_sigma,
                ctx.cfg,
                ctx.t_ms,
            ) {
                reports.push(r);
            }
        }

        // Cross-checks against the camera picture.
        reports.extend(self.cross.evaluate(
            &cam_claims,
            &cpm_views,
            ctx.camera_objects,
            &self.camera_fov,
            (self.position.x, self.position.y),
            ctx.cfg,
            ctx.t_ms,
        ));

        // Pedestrian collision prediction: UWB tracks against perceived
        // vehicle tracks.
        let threats: Vec<TrackState> = self
            .perceived_tracks
            .iter()
            .filter(|(id, t)| {
                self.perceived_class.get(id) == Some(&ObjectClass::Vehicle)
                    && t.last_time_ms() == Some(ctx.t_ms)
            })
            .filter_map(|(_, t)| TrackState::from_track(t, THREAT_VELOCITY_WINDOW))
            .collect();
        let vru_states: Vec<TrackState> = self
            .uwb_tracks
            .values()
            .filter(|t| t.last_time_ms() == Some(ctx.t_ms))
            .filter_map(|t| TrackState::from_track(t, VRU_VELOCITY_WINDOW))
            .collect();
        let object_of = |r: &TrackRef| -> Option<u16> {
            match r {
                TrackRef::LocalObject(id) => Some(*id),
                _ => None,
            }
        };
        for vru in &vru_states {
            if let Some(report) = self.collision.evaluate(
                vru,
                &threats,
                |threat| {
                    // Attribute the threat to the CAM station associated
                    // with that camera object, when one exists.
                    object_of(threat)
                        .and_then(|oid| {
                            self.assoc
                                .iter()
                                .find(|(_, o)| **o == oid)
                                .map(|(s, _)| crate::detection::Offender::Station(*s))
                        })
                        .unwrap_or(crate::detection::Offender::Unknown)
                },
                ctx.cfg,
                ctx.t_ms,
            ) {
                reports.push(report);
            }
        }

        // Report execution with holdoff.
        for report in reports {
            if self.holdoff.allow(&report, ctx.cfg.report_holdoff_ms) {
                self.execute_report(report, ctx, &mut out);
            }
        }

        // Gateway: relay fresh warnings.
        for msg in to_forward {
            out.events.push(TraceEvent::Tx {
                step: ctx.step,
                t_ms: ctx.t_ms,
                station: self.station,
                msg_type: "denm".into(),
                digest: digest_hex(&msg.digest()),
            });
            out.emissions.push(msg);
        }

        // Perception sharing: one CPM per step wrapping the camera picture,
        // through the (possibly compromised) roadside path.
        let cpm = CpmPayload {
            sender: self.station,
            sensor_fov: self.camera_fov,
            objects: ctx.camera_objects.to_vec(),
            gen_time_ms: ctx.t_ms,
        };
        let cpm = attack.transform_cpm(
            ctx.t_ms,
            cpm,
            ctx.camera_object_stations,
            ctx.camera_objects.first().map_or(0.95, |o| o.confidence),
        );
        let payload = Payload::Cpm(cpm);
        if let Ok(bytes) = encode(&payload) {
            if let Ok(msg) = self.hsm.sign(&bytes) {
                let msg = Arc::new(msg);
                out.events.push(TraceEvent::Tx {
                    step: ctx.step,
                    t_ms: ctx.t_ms,
                    station: self.station,
                    msg_type: "cpm".into(),
                    digest: digest_hex(&msg.digest()),
                });
                out.emissions.push(msg);
            }
        }

        // Warning repeats.
        for msg in self.denms.due(ctx.step, ctx.t_ms) {
            out.events.push(TraceEvent::Tx {
                step: ctx.step,
                t_ms: ctx.t_ms,
                station: self.station,
                msg_type: "denm".into(),
                digest: digest_hex(&msg.digest()),
            });
            out.emissions.push(msg);
        }

        out
    }

    /// Heading helper for tests and metrics.
    pub fn camera_heading(&self, from: Point, to: Point) -> f64 {
        wrap_angle((to.y - from.y).atan2(to.x - from.x))
    }

    /// Latest associated camera object for a station, if any.
    pub fn associated_object(&self, station: StationId) -> Option<u16> {
        self.assoc.get(&station).copied()
    }
}

/// The RSU's perceived objects, exposed for integration tests.
impl RsuAgent {
    pub fn perceived_track(&self, object_id: u16) -> Option<&Track> {
        self.perceived_tracks.get(&object_id)
    }

    pub fn uwb_track(&self, tag: u32) -> Option<&Track> {
        self.uwb_tracks.get(&tag)
    }
}

//! UWB-tagged pedestrian with a connected handheld: walks a scripted path,
//! builds threat tracks from received traffic, runs the collision predictor
//! on its own motion, and halts on warnings (its own or relayed ones).

use std::collections::{BTreeMap, BTreeSet};

use crate::detection::checks::check_security;
use crate::detection::collision::{CollisionPredictor, TrackState};
use crate::detection::{DetectionReport, MeasurementSource, Offender, TrackRef};
use crate::geom::Polyline;
use crate::messages::{
    decode, DenmCause, KinematicState, ObjectClass, Payload, StationId,
};
use crate::mitigation::{route, ActionOutcome, AgentContext, MitigationKind};
use crate::trust::Verdict;
use crate::world::fixture::VruCfg;
use crate::world::trace::{digest_hex, TraceEvent};

use super::rsu::VRU_WARNING_RADIUS;
use super::track::Track;
use super::{HmiEntry, ReportHoldoff, TickCtx, TickOut};

/// How long a warning keeps the pedestrian stopped, ms.
const HALT_HOLD_MS: u64 = 4000;
/// Velocity-estimate window for threat tracks, samples.
const THREAT_VELOCITY_WINDOW: usize = 8;

pub struct VruAgent {
    pub station: StationId,
    pub tag: u32,
    path: Polyline,
    walk_speed: f64,
    start_ms: u64,
    pub s: f64,
    halted_until_ms: Option<u64>,
    pub handheld: Vec<HmiEntry>,
    seen_denms: BTreeSet<[u8; 32]>,
    threat_tracks: BTreeMap<TrackRef, Track>,
    threat_class: BTreeMap<TrackRef, ObjectClass>,
    collision: CollisionPredictor,
    holdoff: ReportHoldoff,
}

impl VruAgent {
    pub fn new(cfg: &VruCfg) -> Self {
        Self {
            station: cfg.station,
            tag: cfg.tag,
            path: cfg.path.clone(),
            walk_speed: cfg.speed,
            start_ms: cfg.start_ms,
            s: 0.0,
            halted_until_ms: None,
            handheld: Vec::new(),
            seen_denms: BTreeSet::new(),
            threat_tracks: BTreeMap::new(),
            threat_class: BTreeMap::new(),
            collision: CollisionPredictor::new(),
            holdoff: ReportHoldoff::default(),
        }
    }

    pub fn halted(&self, t_ms: u64) -> bool {
        self.halted_until_ms.is_some_and(|until| t_ms < until)
    }

    fn walking(&self, t_ms: u64) -> bool {
        t_ms >= self.start_ms && !self.halted(t_ms) && self.s < self.path.length()
    }

    pub fn effective_speed(&self, t_ms: u64) -> f64 {
        if self.walking(t_ms) {
            self.walk_speed
        } else {
            0.0
        }
    }

    pub fn true_state(&self, t_ms: u64) -> KinematicState {
        let p = self.path.point_at(self.s);
        KinematicState {
            x: p.x,
            y: p.y,
            heading: self.path.heading_at(self.s),
            speed: self.effective_speed(t_ms),
            accel: 0.0,
        }
    }

    pub fn integrate(&mut self, dt: f64, t_ms: u64) {
        if self.walking(t_ms) {
            self.s = (self.s + self.walk_speed * dt).min(self.path.length());
        }
    }

    fn warn(&mut self, t_ms: u64, text: String) {
        self.handheld.push(HmiEntry { t_ms, text, ineffective: false });
        let until = t_ms + HALT_HOLD_MS;
        self.halted_until_ms =
            Some(self.halted_until_ms.map_or(until, |current| current.max(until)));
    }

    pub fn tick(&mut self, ctx: &TickCtx) -> TickOut {
        let mut out = TickOut::default();
        let own = self.true_state(ctx.t_ms);
        let mut reports: Vec<DetectionReport> = Vec::new();

        for event in &ctx.inbox {
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
            match payload {
                Payload::Denm(denm) => {
                    let near = (denm.event_state.x - own.x).hypot(denm.event_state.y - own.y)
                        <= VRU_WARNING_RADIUS;
                    if denm.cause == DenmCause::VruCollision
                        && near
                        && self.seen_denms.insert(digest)
                    {
                        self.warn(
                            ctx.t_ms,
                            format!("collision warning from {}", denm.sender),
                        );
                    }
                }
                Payload::Cam(cam) => {
                    let key = TrackRef::Station(cam.sender);
                    self.threat_tracks
                        .entry(key)
                        .or_insert_with(|| Track::new(key, MeasurementSource::Cam))
                        .push(cam.gen_time_ms, cam.state);
                    self.threat_class.insert(key, ObjectClass::Vehicle);
                }
                Payload::Cpm(cpm) => {
                    for obj in &cpm.objects {
                        if obj.class != ObjectClass::Vehicle {
                            continue;
                        }
                        let key =
                            TrackRef::CpmObject { sender: cpm.sender, object_id: obj.object_id };
                        self.threat_tracks
                            .entry(key)
                            .or_insert_with(|| Track::new(key, MeasurementSource::Cpm))
                            .push(cpm.gen_time_ms, obj.state);
                        self.threat_class.insert(key, obj.class);
                    }
                }
                _ => {}
            }
        }

        // Collision computation on the handheld: own motion is known
        // exactly; threats come from the received traffic.
        let (vx, vy) = own.velocity();
        let me = TrackState::from_self_knowledge(
            TrackRef::UwbTag(self.tag),
            own.x,
            own.y,
            vx,
            vy,
        );
        let threats: Vec<TrackState> = self
            .threat_tracks
            .values()
            .filter(|t| t.last_time_ms().is_some_and(|lt| ctx.t_ms.saturating_sub(lt) <= 300))
            .filter_map(|t| TrackState::from_track(t, THREAT_VELOCITY_WINDOW))
            .collect();
        if let Some(report) = self.collision.evaluate(
            &me,
            &threats,
            |threat| match threat {
                TrackRef::Station(s) => Offender::Station(*s),
                _ => Offender::Unknown,
            },
            ctx.cfg,
            ctx.t_ms,
        ) {
            reports.push(report);
        }

        for report in reports {
            if !self.holdoff.allow(&report, ctx.cfg.report_holdoff_ms) {
                continue;
            }
            out.events.push(TraceEvent::Detection {
                step: ctx.step,
                t_ms: ctx.t_ms,
                station: self.station,
                report: report.clone(),
            });
            if !ctx.mitigation_enabled {
                continue;
            }
            let Ok(actions) = route(&report, ctx.policy, AgentContext::Vru) else {
                continue;
            };
            for action in actions {
                if action == MitigationKind::HmiNotify {
                    let ttc = report.ttc_ms.map(|t| t as f64 / 1000.0).unwrap_or(0.0);
                    self.warn(ctx.t_ms, format!("imminent collision, ttc {ttc:.1} s"));
                    out.events.push(TraceEvent::Mitigation {
                        step: ctx.step,
                        t_ms: ctx.t_ms,
                        station: self.station,
                        action,
                        outcome: ActionOutcome::Delivered,
                        detail: Some("wearable".into()),
                    });
                }
            }
        }

        out
    }
}

//! Connected vehicle OBU: drives its lane under the believed signal phase,
//! emits CAMs (truthful or hijacked), senses ahead with its onboard sensor,
//! runs the vehicle-side detector bank (security, plausibility, consistency,
//! cross-check, pedestrian-filter gating, CAN timing), and executes
//! mitigation including the warn-then-purge chain.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::attacks::{build_can_stream, AttackRuntime, FakeStopProfile};
use crate::canbus::CanFrame;
use crate::detection::can::{learn_baseline, CanDetectConfig, CanMonitor};
use crate::detection::checks::{check_plausibility, check_security, ConsistencyTracker};
use crate::detection::cross_check::{CamClaim, CpmView, CrossChecker};
use crate::detection::ekf::{EkfState, NisGate};
use crate::detection::{
    Anomaly, DetectionReport, Detector, MeasurementSource, Offender, TrackRef,
};
use crate::messages::{
    decode, encode, CamPayload, CpmPayload, DenmCause, FieldOfView, KinematicState, ObjectClass,
    Payload, PerceivedObject, PhaseState, StationId,
};
use crate::mitigation::{denm_cause_for, route, ActionOutcome, AgentContext, MitigationKind};
use crate::trust::{Hsm, Verdict};
use crate::world::fixture::{LaneDef, OnboardAttackMode, VehicleCfg};
use crate::world::trace::{digest_hex, TraceEvent};

use super::rsu::build_denm;
use super::track::Track;
use super::{DenmScheduler, HmiEntry, ReportHoldoff, TickCtx, TickOut, TruthActor};

/// Comfortable and emergency deceleration bounds, m/s^2.
const COMFORT_DECEL: f64 = 3.0;
const EMERGENCY_DECEL: f64 = 8.0;
/// Braking engages once the required deceleration reaches this value.
const BRAKE_TRIGGER: f64 = 1.0;
/// The vehicle aims to stop this far short of the stop line.
const STOP_BUFFER: f64 = 0.5;
/// Association gate for pedestrian filters, meters.
const FILTER_ASSOC_GATE: f64 = 1.5;
/// Remote measurements are monitor-only while a local fix is this fresh.
const LOCAL_COVERAGE_MS: u64 = 500;
/// Filters idle longer than this are dropped.
const FILTER_TTL_MS: u64 = 3000;

struct PedFilter {
    state: EkfState,
    gate: NisGate,
    last_local_ms: Option<u64>,
    last_touch_ms: u64,
}

pub struct OnboardCan {
    frames: Vec<CanFrame>,
    idx: usize,
    train_end_ms: f64,
    monitor: Option<CanMonitor>,
    train_failed: bool,
}

impl OnboardCan {
    pub fn monitor(&self) -> Option<&CanMonitor> {
        self.monitor.as_ref()
    }
}

pub struct VehicleAgent {
    pub station: StationId,
    hsm: Hsm,
    lane: LaneDef,
    pub s: f64,
    pub speed: f64,
    pub accel_cmd: f64,
    target_speed: f64,
    start_ms: u64,
    onboard_enabled: bool,
    onboard_range: f64,
    onboard_half_angle: f64,
    onboard_sigma: f64,
    emit_cpm: bool,
    rng: ChaCha8Rng,
    onboard_ids: BTreeMap<StationId, u16>,
    next_onboard_id: u16,
    believed: BTreeMap<u8, PhaseState>,
    consistency: ConsistencyTracker,
    cross: CrossChecker,
    filters: Vec<PedFilter>,
    cam_tracks: BTreeMap<StationId, Track>,
    pub hmi: Vec<HmiEntry>,
    seen_denms: BTreeSet<[u8; 32]>,
    fake: Option<FakeStopProfile>,
    pub can: Option<OnboardCan>,
    denms: DenmScheduler,
    holdoff: ReportHoldoff,
    compromise_fired: bool,
    pending_purge: bool,
    purge_noted: bool,
}

impl VehicleAgent {
    pub fn new(cfg: &VehicleCfg, lane: LaneDef, hsm: Hsm, rng: ChaCha8Rng) -> Self {
        Self {
            station: cfg.station,
            hsm,
            lane,
            s: cfg.spawn_s,
            speed: 0.0,
            accel_cmd: 0.0,
            target_speed: cfg.target_speed,
            start_ms: cfg.start_ms,
            onboard_enabled: cfg.onboard_enabled,
            onboard_range: cfg.onboard_range,
            onboard_half_angle: cfg.onboard_half_angle,
            onboard_sigma: cfg.onboard_sigma,
            emit_cpm: cfg.emit_cpm,
            rng,
            onboard_ids: BTreeMap::new(),
            next_onboard_id: 1,
            believed: BTreeMap::new(),
            consistency: ConsistencyTracker::new(),
            cross: CrossChecker::new(),
            filters: Vec::new(),
            cam_tracks: BTreeMap::new(),
            hmi: Vec::new(),
            seen_denms: BTreeSet::new(),
            fake: None,
            can: None,
            denms: DenmScheduler::default(),
            holdoff: ReportHoldoff::default(),
            compromise_fired: false,
            pending_purge: false,
            purge_noted: false,
        }
    }

    /// Installs the in-vehicle CAN substrate for this run.
    pub fn install_can(
        &mut self,
        schedule: &crate::canbus::CanSchedule,
        duration_ms: f64,
        seed: u64,
        attack: Option<(&OnboardAttackMode, f64)>,
        train_window_ms: u64,
    ) -> Result<(), crate::canbus::CanBusError> {
        let frames = build_can_stream(schedule, duration_ms, seed, attack)?;
        self.can = Some(OnboardCan {
            frames,
            idx: 0,
            train_end_ms: train_window_ms as f64,
            monitor: None,
            train_failed: false,
        });
        Ok(())
    }

    pub fn is_purged(&self) -> bool {
        self.hsm.is_purged()
    }

    pub fn lane_id(&self) -> u16 {
        self.lane.id
    }

    /// Ground-truth kinematics at the current integration state.
    pub fn true_state(&self) -> KinematicState {
        let p = self.lane.path.point_at(self.s);
        KinematicState {
            x: p.x,
            y: p.y,
            heading: self.lane.path.heading_at(self.s),
            speed: self.speed,
            accel: self.accel_cmd,
        }
    }

    pub fn started(&self, t_ms: u64) -> bool {
        t_ms >= self.start_ms
    }

    /// A vehicle that reached its path end has left the scene: it is no
    /// longer sensed and stops transmitting.
    pub fn active(&self, t_ms: u64) -> bool {
        self.started(t_ms) && self.s < self.lane.path.length() - 0.5
    }

    /// Constant-acceleration integration with an exact stop at zero speed.
    pub fn integrate(&mut self, dt: f64, t_ms: u64) {
        if !self.started(t_ms) {
            return;
        }
        let a = self.accel_cmd;
        let v = self.speed;
        let te = if a < 0.0 { (v / -a).min(dt) } else { dt };
        let ds = v * te + 0.5 * a * te * te;
        self.s = (self.s + ds.max(0.0)).min(self.lane.path.length());
        self.speed = (v + a * dt).clamp(0.0, 100.0);
        if self.s >= self.lane.path.length() {
            self.speed = 0.0;
        }
    }

    fn phase_for_me(&self) -> Option<PhaseState> {
        self.believed.get(&self.lane.signal_group).copied()
    }

    /// Longitudinal control: hold the target speed, brake for believed
    /// stop-demanding phases with `v^2 / (2 d)`, bounded by the emergency
    /// limit. A hijacked vehicle ignores the lights.
    fn controller(&mut self, t_ms: u64, hacked: bool) -> f64 {
        if !self.started(t_ms) {
            return 0.0;
        }
        let dt = 0.1;
        let cruise = ((self.target_speed - self.speed) / dt).clamp(-COMFORT_DECEL, COMFORT_DECEL);
        if hacked {
            return cruise;
        }
        let stop_phase = match self.phase_for_me() {
            Some(PhaseState::Red) | Some(PhaseState::RedYellowBlinking) => true,
            Some(PhaseState::Yellow) => {
                let d = (self.lane.stop_line_s - self.s - STOP_BUFFER).max(0.05);
                self.speed * self.speed / (2.0 * d) <= COMFORT_DECEL
            }
            _ => false,
        };
        if stop_phase && self.s < self.lane.stop_line_s {
            let d = self.lane.stop_line_s - self.s - STOP_BUFFER;
            if self.speed < 0.05 && d < 3.0 {
                return 0.0;
            }
            if d <= 0.05 {
                return -EMERGENCY_DECEL;
            }
            let req = self.speed * self.speed / (2.0 * d);
            if req >= BRAKE_TRIGGER {
                if req > EMERGENCY_DECEL {
                    // Cannot stop anymore; clear the box instead.
                    return cruise;
                }
                return -req;
            }
        }
        cruise
    }

    /// Onboard perception: other actors inside the forward sensor cone, with
    /// seeded Gaussian position noise. Motion fields are not estimated.
    fn sense_onboard(&mut self, truth: &[TruthActor]) -> Vec<PerceivedObject> {
        if !self.onboard_enabled {
            return Vec::new();
        }
        let own = self.true_state();
        let fov = FieldOfView {
            origin_x: own.x,
            origin_y: own.y,
            orientation: own.heading,
            range: self.onboard_range,
            half_angle: self.onboard_half_angle,
        };
        let noise = Normal::new(0.0, self.onboard_sigma.max(1e-12)).expect("valid sigma");
        let mut objects = Vec::new();
        for actor in truth {
            if actor.station == self.station {
                continue;
            }
            if !fov.contains(actor.state.x, actor.state.y) {
                continue;
            }
            let (nx, ny) = if self.onboard_sigma > 0.0 {
                (self.rng.sample(noise), self.rng.sample(noise))
            } else {
                (0.0, 0.0)
            };
            let x = actor.state.x + nx;
            let y = actor.state.y + ny;
            if !fov.contains(x, y) {
                continue;
            }
            let id = match self.onboard_ids.get(&actor.station) {
                Some(&id) => id,
                None => {
                    let id = self.next_onboard_id;
                    self.next_onboard_id += 1;
                    self.onboard_ids.insert(actor.station, id);
                    id
                }
            };
            objects.push(PerceivedObject {
                object_id: id,
                state: KinematicState::new(x, y, 0.0, 0.0, 0.0),
                confidence: 0.9,
                class: actor.class,
            });
        }
        objects
    }

    fn onboard_fov(&self) -> FieldOfView {
        let own = self.true_state();
        FieldOfView {
            origin_x: own.x,
            origin_y: own.y,
            orientation: own.heading,
            range: self.onboard_range,
            half_angle: self.onboard_half_angle,
        }
    }

    /// Pedestrian-filter bank: local measurements are always fused; remote
    /// ones are monitored against the local reference, gated, and fused only
    /// when no fresh local coverage exists.
    fn filter_update(
        &mut self,
        t_ms: u64,
        locals: &[(u16, Vector2<f64>)],
        remotes: &[(StationId, u16, Vector2<f64>, [u8; 32])],
        cfg: &crate::detection::DetectionConfig,
    ) -> Vec<DetectionReport> {
        let q = cfg.gate.process_noise_q;
        let mut reports = Vec::new();

        // Bring every filter to the current time once.
        self.filters.retain(|f| t_ms.saturating_sub(f.last_touch_ms) <= FILTER_TTL_MS);
        for f in &mut self.filters {
            if let Ok(p) = f.state.predict(t_ms, q) {
                f.state = p;
            }
        }

        let r_local = Matrix2::identity() * self.onboard_sigma * self.onboard_sigma;
        for (_, z) in locals {
            let nearest = self
                .filters
                .iter_mut()
                .map(|f| {
                    let d = (f.state.position() - z).norm();
                    (d, f)
                })
                .filter(|(d, _)| *d <= FILTER_ASSOC_GATE)
                .min_by(|a, b| a.0.total_cmp(&b.0));
            match nearest {
                Some((_, f)) => {
                    if let Ok((post, _)) = f.state.update(*z, r_local) {
                        f.state = post;
                    }
                    f.last_local_ms = Some(t_ms);
                    f.last_touch_ms = t_ms;
                }
                None => {
                    self.filters.push(PedFilter {
                        state: EkfState::from_measurement(
                            *z,
                            self.onboard_sigma * self.onboard_sigma,
                            t_ms,
                        ),
                        gate: NisGate::new(),
                        last_local_ms: Some(t_ms),
                        last_touch_ms: t_ms,
                    });
                }
            }
        }

        let r_remote = Matrix2::identity() * cfg.cpm_sigma * cfg.cpm_sigma;
        for (sender, _obj, z, digest) in remotes {
            let nearest = self
                .filters
                .iter_mut()
                .map(|f| {
                    let d = (f.state.position() - z).norm();
                    (d, f)
                })
                .filter(|(d, _)| *d <= FILTER_ASSOC_GATE)
                .min_by(|a, b| a.0.total_cmp(&b.0));
            match nearest {
                Some((_, f)) => {
                    let Ok(nis) = f.state.nis(*z, r_remote) else { continue };
                    let local_fresh = f
                        .last_local_ms
                        .is_some_and(|lm| t_ms.saturating_sub(lm) <= LOCAL_COVERAGE_MS);
                    if f.gate.feed(MeasurementSource::Cpm, nis, &cfg.gate).is_some() {
                        f.gate.rearm(MeasurementSource::Cpm);
                        reports.push(DetectionReport {
                            detector: Detector::EkfGate,
                            anomaly: Anomaly::InconsistentStream,
                            offender: Offender::Station(*sender),
                            evidence: vec![*digest],
                            tracks: None,
                            source: Some(MeasurementSource::Cpm),
                            ttc_ms: None,
                            sim_time_ms: t_ms,
                        });
                    }
                    // Remote data extends coverage where local sensors see
                    // nothing; with a fresh local reference it is monitored
                    // only, so a lying stream cannot drag the fused state.
                    if !local_fresh {
                        if let Ok((post, _)) = f.state.update(*z, r_remote) {
                            f.state = post;
                        }
                    }
                    f.last_touch_ms = t_ms;
                }
                None => {
                    self.filters.push(PedFilter {
                        state: EkfState::from_measurement(
                            *z,
                            cfg.cpm_sigma * cfg.cpm_sigma,
                            t_ms,
                        ),
                        gate: NisGate::new(),
                        last_local_ms: None,
                        last_touch_ms: t_ms,
                    });
                }
            }
        }
        reports
    }

    fn execute_report(&mut self, report: DetectionReport, ctx: &TickCtx, out: &mut TickOut) {
        out.events.push(TraceEvent::Detection {
            step: ctx.step,
            t_ms: ctx.t_ms,
            station: self.station,
            report: report.clone(),
        });
        if !ctx.mitigation_enabled {
            return;
        }
        let Ok(actions) = route(&report, ctx.policy, AgentContext::Vehicle) else {
            return;
        };
        for action in actions {
            match action {
                MitigationKind::BroadcastDenm => {
                    let cause = denm_cause_for(&report);
                    let event_pos = match report.offender {
                        Offender::Station(s) => self
                            .cam_tracks
                            .get(&s)
                            .and_then(|t| t.latest())
                            .map(|&(_, st)| (st.x, st.y))
                            .unwrap_or_else(|| {
                                let own = self.true_state();
                                (own.x, own.y)
                            }),
                        _ => {
                            let own = self.true_state();
                            (own.x, own.y)
                        }
                    };
                    let offender = match report.offender {
                        Offender::Station(s) => s,
                        // In-vehicle findings are self-reported.
                        Offender::CanId(_) => self.station,
                        Offender::Unknown => StationId::UNKNOWN,
                    };
                    let evidence = report.evidence.first().copied().unwrap_or([0u8; 32]);
                    if let Some(msg) = build_denm(
                        &self.hsm,
                        self.station,
                        cause,
                        event_pos,
                        offender,
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
                MitigationKind::PurgeOwnKeys => {
                    self.pending_purge = true;
                    out.events.push(TraceEvent::Mitigation {
                        step: ctx.step,
                        t_ms: ctx.t_ms,
                        station: self.station,
                        action,
                        outcome: ActionOutcome::Delivered,
                        detail: None,
                    });
                }
                MitigationKind::HmiNotify => {
                    let hacked = self.fake.is_some();
                    self.hmi.push(HmiEntry {
                        t_ms: ctx.t_ms,
                        text: format!(
                            "{}: {}",
                            report.detector.label(),
                            report.anomaly.label()
                        ),
                        ineffective: hacked,
                    });
                    out.events.push(TraceEvent::Mitigation {
                        step: ctx.step,
                        t_ms: ctx.t_ms,
                        station: self.station,
                        action,
                        outcome: ActionOutcome::Delivered,
                        detail: None,
                    });
                }
                MitigationKind::RequestLightOverride(_) => {}
            }
        }
    }

    /// The warn-then-purge chain for in-vehicle compromise findings.
    fn compromise_chain(&mut self, cause: DenmCause, evidence: [u8; 32], ctx: &TickCtx, out: &mut TickOut) {
        if !ctx.mitigation_enabled {
            return;
        }
        let own = self.true_state();
        if let Some(msg) =
            build_denm(&self.hsm, self.station, cause, (own.x, own.y), self.station, evidence, ctx.t_ms)
        {
            out.events.push(TraceEvent::Mitigation {
                step: ctx.step,
                t_ms: ctx.t_ms,
                station: self.station,
                action: MitigationKind::BroadcastDenm,
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
            out.emissions.push(msg);
        }
        self.pending_purge = true;
        out.events.push(TraceEvent::Mitigation {
            step: ctx.step,
            t_ms: ctx.t_ms,
            station: self.station,
            action: MitigationKind::PurgeOwnKeys,
            outcome: ActionOutcome::Delivered,
            detail: Some(cause.label().to_string()),
        });
    }

    pub fn tick(&mut self, ctx: &TickCtx, attack: &mut AttackRuntime) -> TickOut {
        let mut out = TickOut::default();
        let mut reports: Vec<DetectionReport> = Vec::new();
        let mut cam_claims: Vec<CamClaim> = Vec::new();
        let mut cpm_views: Vec<CpmView> = Vec::new();
        let mut remote_peds: Vec<(StationId, u16, Vector2<f64>, [u8; 32])> = Vec::new();

        let hacked = attack.vehicle_hacked(self.station, ctx.t_ms);
        if hacked && self.fake.is_none() {
            let distance = (self.lane.stop_line_s - self.s).max(0.1);
            self.fake = Some(FakeStopProfile::begin(self.s, self.speed, distance));
            self.hmi.push(HmiEntry {
                t_ms: ctx.t_ms,
                text: "platform control lost".into(),
                ineffective: true,
            });
        }

        // Onboard perception first; it is this tick's local reference.
        let onboard_objects = self.sense_onboard(ctx.truth);

        // Inbox.
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
            if let Some(r) = check_plausibility(&payload, digest, ctx.cfg, ctx.t_ms) {
                reports.push(r);
                continue;
            }
            match payload {
                Payload::Spat(spat) => {
                    for ph in &spat.phases {
                        self.believed.insert(ph.signal_group, ph.state);
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
                    cam_claims.push(CamClaim {
                        station: cam.sender,
                        x: cam.state.x,
                        y: cam.state.y,
                        digest,
                    });
                }
                Payload::Cpm(cpm) => {
                    for obj in &cpm.objects {
                        if matches!(obj.class, ObjectClass::Pedestrian | ObjectClass::Cyclist) {
                            remote_peds.push((
                                cpm.sender,
                                obj.object_id,
                                Vector2::new(obj.state.x, obj.state.y),
                                digest,
                            ));
                        }
                    }
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
                    if self.seen_denms.insert(digest) {
                        self.hmi.push(HmiEntry {
                            t_ms: ctx.t_ms,
                            text: format!(
                                "warning {} offender={}",
                                denm.cause.label(),
                                denm.offender
                            ),
                            ineffective: hacked,
                        });
                    }
                }
                Payload::Map(_) => {}
            }
        }

        // Pedestrian-model gating: local fixes first, then remote claims.
        let locals: Vec<(u16, Vector2<f64>)> = onboard_objects
            .iter()
            .filter(|o| matches!(o.class, ObjectClass::Pedestrian | ObjectClass::Cyclist))
            .map(|o| (o.object_id, Vector2::new(o.state.x, o.state.y)))
            .collect();
        reports.extend(self.filter_update(ctx.t_ms, &locals, &remote_peds, ctx.cfg));

        // Cross-checks against the onboard picture.
        if self.onboard_enabled {
            let own = self.true_state();
            reports.extend(self.cross.evaluate(
                &cam_claims,
                &cpm_views,
                &onboard_objects,
                &self.onboard_fov(),
                (own.x, own.y),
                ctx.cfg,
                ctx.t_ms,
            ));
        }

        // In-vehicle paths: CAN timing and the injected compromise signal.
        if let Some(mode) = attack.onboard_mode(self.station, ctx.t_ms) {
            if matches!(mode, OnboardAttackMode::Compromise) && !self.compromise_fired {
                self.compromise_fired = true;
                self.compromise_chain(DenmCause::OnboardCompromise, [0u8; 32], ctx, &mut out);
            }
        }
        if let Some(can) = &mut self.can {
            let step_end = ctx.t_ms as f64 + 100.0;
            if can.monitor.is_none() && !can.train_failed && ctx.t_ms as f64 >= can.train_end_ms {
                let cut = can
                    .frames
                    .partition_point(|f| f.timestamp_ms < can.train_end_ms);
                match learn_baseline(&can.frames[..cut], &CanDetectConfig::default()) {
                    Ok(model) => {
                        can.monitor = Some(CanMonitor::new(model, CanDetectConfig::default()));
                    }
                    Err(e) => {
                        can.train_failed = true;
                        self.hmi.push(HmiEntry {
                            t_ms: ctx.t_ms,
                            text: format!("CAN baseline unavailable: {e}"),
                            ineffective: false,
                        });
                    }
                }
            }
            let mut can_reports = Vec::new();
            while can.idx < can.frames.len() && can.frames[can.idx].timestamp_ms < step_end {
                let frame = can.frames[can.idx].clone();
                can.idx += 1;
                if let Some(monitor) = &mut can.monitor {
                    if frame.timestamp_ms >= can.train_end_ms {
                        can_reports.extend(monitor.feed(&frame, ctx.t_ms));
                    }
                }
            }
            reports.extend(can_reports);
        }

        // A purged unit can no longer execute the notification chain; its
        // findings stay on the local HMI.
        for report in reports {
            if !self.holdoff.allow(&report, ctx.cfg.report_holdoff_ms) {
                continue;
            }
            if self.hsm.is_purged() || self.pending_purge {
                self.hmi.push(HmiEntry {
                    t_ms: ctx.t_ms,
                    text: format!("(offline) {}: {}", report.detector.label(), report.anomaly.label()),
                    ineffective: false,
                });
                continue;
            }
            self.execute_report(report, ctx, &mut out);
        }

        // Drive.
        self.accel_cmd = self.controller(ctx.t_ms, hacked);

        // Emissions. A purged unit is silent.
        if self.hsm.is_purged() || self.pending_purge {
            if !self.purge_noted {
                self.purge_noted = true;
                self.hmi.push(HmiEntry {
                    t_ms: ctx.t_ms,
                    text: "transmissions disabled: keys purged".into(),
                    ineffective: false,
                });
            }
        } else if self.active(ctx.t_ms) {
            let cam_state = match &mut self.fake {
                Some(fake) => {
                    let p = self.lane.path.point_at(fake.s);
                    let state = KinematicState {
                        x: p.x,
                        y: p.y,
                        heading: self.lane.path.heading_at(fake.s),
                        speed: fake.speed,
                        accel: fake.reported_accel(),
                    };
                    fake.advance(0.1);
                    state
                }
                None => self.true_state(),
            };
            let cam = Payload::Cam(CamPayload {
                sender: self.station,
                state: cam_state,
                gen_time_ms: ctx.t_ms,
            });
            if let Ok(bytes) = encode(&cam) {
                if let Ok(msg) = self.hsm.sign(&bytes) {
                    let msg = Arc::new(msg);
                    out.events.push(TraceEvent::Tx {
                        step: ctx.step,
                        t_ms: ctx.t_ms,
                        station: self.station,
                        msg_type: "cam".into(),
                        digest: digest_hex(&msg.digest()),
                    });
                    out.emissions.push(msg);
                }
            }
            if self.emit_cpm && self.onboard_enabled {
                let cpm = Payload::Cpm(CpmPayload {
                    sender: self.station,
                    sensor_fov: self.onboard_fov(),
                    objects: onboard_objects.clone(),
                    gen_time_ms: ctx.t_ms,
                });
                if let Ok(bytes) = encode(&cpm) {
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
            }
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
        }

        if self.pending_purge && !self.hsm.is_purged() {
            self.hsm.purge_keys();
        }

        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Point, Polyline};
    use crate::messages::Approach;
    use crate::trust::{PermissionSet, Pki};
    use rand::SeedableRng;

    fn straight_lane() -> LaneDef {
        LaneDef {
            id: 1,
            ingress: Approach::W,
            egress: Approach::E,
            signal_group: 6,
            path: Polyline::new(vec![Point::new(-115.0, -4.0), Point::new(165.0, -4.0)]),
            stop_line_s: 100.0,
            exit_s: 127.0,
        }
    }

    fn vehicle(spawn_s: f64, speed: f64) -> VehicleAgent {
        let pki = Pki::new(1);
        let hsm = pki.issue_station(StationId(11), PermissionSet::SEND_CAM.union(PermissionSet::SEND_DENM));
        let cfg = crate::world::fixture::VehicleCfg {
            station: StationId(11),
            lane: 1,
            spawn_s,
            target_speed: 10.0,
            start_ms: 0,
            onboard_enabled: false,
            onboard_range: 80.0,
            onboard_half_angle: 1.0,
            onboard_sigma: 0.2,
            emit_cpm: false,
        };
        let mut v = VehicleAgent::new(&cfg, straight_lane(), hsm, rand_chacha::ChaCha8Rng::seed_from_u64(1));
        v.speed = speed;
        v
    }

    #[test]
    fn constant_speed_advances_one_meter_per_step() {
        let mut v = vehicle(0.0, 10.0);
        v.accel_cmd = 0.0;
        v.integrate(0.1, 0);
        assert!((v.s - 1.0).abs() < 1e-12);
        assert_eq!(v.speed, 10.0);
    }

    #[test]
    fn hard_braking_clamps_speed_at_zero() {
        let mut v = vehicle(0.0, 0.5);
        v.accel_cmd = -8.0;
        v.integrate(0.1, 0);
        assert_eq!(v.speed, 0.0);
        // Exact-stop integration: v^2 / (2 |a|) = 0.015625 m, never backward.
        assert!((v.s - 0.015625).abs() < 1e-12);
        v.integrate(0.1, 0);
        assert!((v.s - 0.015625).abs() < 1e-12, "no backward creep");
    }

    #[test]
    fn red_light_braking_uses_stopping_distance_law() {
        // Believed red 30 m short of the stop line at 10 m/s: the chosen
        // deceleration is v^2 / (2 d) = 1.67 m/s^2, comfortably under 3.
        let mut v = vehicle(69.5, 10.0);
        v.believed.insert(6, PhaseState::Red);
        let a = v.controller(0, false);
        assert!((a + 100.0 / 60.0).abs() < 1e-9, "got {a}");
        assert!(a.abs() <= COMFORT_DECEL);
    }

    #[test]
    fn green_light_holds_target_speed() {
        let mut v = vehicle(50.0, 10.0);
        v.believed.insert(6, PhaseState::Green);
        assert_eq!(v.controller(0, false), 0.0);
        // And accelerates back to target when slow.
        v.speed = 8.0;
        assert!((v.controller(0, false) - COMFORT_DECEL).abs() < 1e-9);
    }

    #[test]
    fn hijacked_vehicle_ignores_red() {
        let mut v = vehicle(69.5, 10.0);
        v.believed.insert(6, PhaseState::Red);
        assert_eq!(v.controller(0, true), 0.0, "holds target speed through red");
    }

    #[test]
    fn red_yellow_blinking_demands_stop() {
        let mut v = vehicle(69.5, 10.0);
        v.believed.insert(6, PhaseState::RedYellowBlinking);
        assert!(v.controller(0, false) < 0.0);
    }

    #[test]
    fn yellow_is_stopped_for_only_when_comfortable() {
        // 10 m short at 10 m/s would need 5.2 m/s^2: run the yellow.
        let mut v = vehicle(90.0, 10.0);
        v.believed.insert(6, PhaseState::Yellow);
        assert!(v.controller(0, false) >= 0.0);
        // 40 m short needs 1.27: stop.
        let mut v2 = vehicle(60.0, 10.0);
        v2.believed.insert(6, PhaseState::Yellow);
        assert!(v2.controller(0, false) < 0.0);
    }

    #[test]
    fn vehicle_despawns_at_path_end() {
        let mut v = vehicle(279.0, 10.0);
        assert!(v.active(0));
        v.accel_cmd = 0.0;
        for _ in 0..10 {
            v.integrate(0.1, 0);
        }
        assert!(!v.active(0));
        assert_eq!(v.speed, 0.0);
    }
}

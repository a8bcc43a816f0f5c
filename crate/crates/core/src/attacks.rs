//! Scripted attack injectors. Each transforms honest agent behavior into the
//! corresponding malicious behavior from a configured onset time onward.
//!
//! Injectors never touch the trust layer: every malicious message is still
//! signed by the legitimate (compromised) unit and verifies cleanly. Before
//! the onset, behavior is bit-identical to the clean scenario.

use std::collections::BTreeMap;

use crate::canbus::{CanFrame, CanSchedule};
use crate::messages::{
    CpmPayload, KinematicState, ObjectClass, PerceivedObject, StationId,
};
use crate::world::fixture::{
    AttackPlan, CpmAttackMode, OnboardAttackMode, SpatAttackMode,
};

/// Object id the roadside injector uses for fabricated objects.
pub const GHOST_OBJECT_ID: u16 = 500;

/// Runtime view of the scenario's attack plan.
#[derive(Debug, Clone, Default)]
pub struct AttackRuntime {
    plan: Option<AttackPlan>,
    /// Frozen state for the falsify mode, captured at onset.
    frozen: Option<KinematicState>,
}

impl AttackRuntime {
    pub fn new(plan: Option<AttackPlan>) -> Self {
        Self { plan, frozen: None }
    }

    pub fn plan(&self) -> Option<&AttackPlan> {
        self.plan.as_ref()
    }

    pub fn onset_ms(&self) -> Option<u64> {
        self.plan.as_ref().map(|p| p.onset_ms())
    }

    fn active(&self, t_ms: u64) -> bool {
        self.plan.as_ref().is_some_and(|p| t_ms >= p.onset_ms())
    }

    /// Rewrites the RSU's outgoing CPM per the malicious-CPM scenario:
    /// falsify an object's motion, add a ghost, or suppress a real object.
    /// `object_stations` links camera object ids to the ground-truth station
    /// they observe (the compromised sensor knows what it is looking at).
    pub fn transform_cpm(
        &mut self,
        t_ms: u64,
        mut cpm: CpmPayload,
        object_stations: &BTreeMap<u16, StationId>,
        camera_confidence: f64,
    ) -> CpmPayload {
        let Some(AttackPlan::MaliciousCpm { mode, .. }) = &self.plan else {
            return cpm;
        };
        if !self.active(t_ms) {
            return cpm;
        }
        match mode {
            CpmAttackMode::Falsify { target } => {
                for obj in &mut cpm.objects {
                    if object_stations.get(&obj.object_id) == Some(target) {
                        let frozen = self.frozen.get_or_insert_with(|| {
                            // A consistent stop lie: hold the onset position,
                            // report zero motion.
                            KinematicState {
                                speed: 0.0,
                                accel: 0.0,
                                ..obj.state
                            }
                        });
                        obj.state = *frozen;
                    }
                }
            }
            CpmAttackMode::Ghost { position } => {
                cpm.objects.push(PerceivedObject {
                    object_id: GHOST_OBJECT_ID,
                    state: KinematicState::new(position.x, position.y, 0.0, 0.0, 0.0),
                    confidence: camera_confidence,
                    class: ObjectClass::Vehicle,
                });
            }
            CpmAttackMode::Suppress { target } => {
                cpm.objects
                    .retain(|obj| object_stations.get(&obj.object_id) != Some(target));
            }
        }
        cpm
    }

    /// Whether the given vehicle is under hostile control at `t_ms`
    /// (scenarios 2 and 4).
    pub fn vehicle_hacked(&self, station: StationId, t_ms: u64) -> bool {
        match &self.plan {
            Some(AttackPlan::HackedVehicle { target, .. })
            | Some(AttackPlan::VruThreat { target, .. }) => {
                *target == station && self.active(t_ms)
            }
            _ => false,
        }
    }

    /// SPaT falsification mode once the traffic light is compromised.
    pub fn spat_mode(&self, t_ms: u64) -> Option<&SpatAttackMode> {
        match &self.plan {
            Some(AttackPlan::HackedSpat { mode, .. }) if self.active(t_ms) => Some(mode),
            _ => None,
        }
    }

    /// Whether the light controller itself is compromised (it then ignores
    /// override requests per its honor probability).
    pub fn light_hacked(&self, t_ms: u64) -> bool {
        matches!(&self.plan, Some(AttackPlan::HackedSpat { .. })) && self.active(t_ms)
    }

    /// The in-vehicle attack mode for scenario 5, if active against the
    /// given vehicle.
    pub fn onboard_mode(&self, station: StationId, t_ms: u64) -> Option<&OnboardAttackMode> {
        match &self.plan {
            Some(AttackPlan::Onboard { target, mode, .. })
                if *target == station && self.active(t_ms) =>
            {
                Some(mode)
            }
            _ => None,
        }
    }

    /// Target vehicle of the in-vehicle scenario, regardless of onset.
    pub fn hacked_vehicle_target(&self) -> Option<StationId> {
        match &self.plan {
            Some(AttackPlan::HackedVehicle { target, .. })
            | Some(AttackPlan::VruThreat { target, .. }) => Some(*target),
            _ => None,
        }
    }
}

/// Synthetic gentle-stop profile emitted in CAMs by a hacked vehicle:
/// constant deceleration `v^2 / (2 d)` from the onset state, integrated
/// along the lane path so the stream stays kinematically consistent.
#[derive(Debug, Clone)]
pub struct FakeStopProfile {
    pub s: f64,
    pub speed: f64,
    pub decel: f64,
    pub stop_s: f64,
}

impl FakeStopProfile {
    /// Captures the profile at attack onset. `distance_to_stop` is measured
    /// along the path to the stop line.
    pub fn begin(s: f64, speed: f64, distance_to_stop: f64) -> Self {
        let d = distance_to_stop.max(0.1);
        let decel = (speed * speed / (2.0 * d)).max(0.0);
        Self { s, speed, decel, stop_s: s + d }
    }

    /// Advances the fake kinematics by one step.
    pub fn advance(&mut self, dt: f64) {
        if self.speed <= 0.0 {
            self.speed = 0.0;
            return;
        }
        let t_stop = self.speed / self.decel.max(1e-9);
        let te = dt.min(t_stop);
        self.s += self.speed * te - 0.5 * self.decel * te * te;
        self.speed = (self.speed - self.decel * dt).max(0.0);
        if self.speed == 0.0 {
            self.s = self.s.min(self.stop_s);
        }
    }

    /// Reported acceleration field: the deceleration while still moving.
    pub fn reported_accel(&self) -> f64 {
        if self.speed > 0.0 {
            -self.decel
        } else {
            0.0
        }
    }
}

/// Builds the full CAN frame stream for a run: nominal traffic plus the
/// flood/injection/modification transform from onset onward.
pub fn build_can_stream(
    schedule: &CanSchedule,
    duration_ms: f64,
    seed: u64,
    attack: Option<(&OnboardAttackMode, f64)>,
) -> Result<Vec<CanFrame>, crate::canbus::CanBusError> {
    let mut frames = crate::canbus::generate_traffic(schedule, duration_ms, seed)?;
    let Some((mode, onset_ms)) = attack else {
        return Ok(frames);
    };
    match mode {
        OnboardAttackMode::Compromise => {}
        OnboardAttackMode::CanDos { rate_multiplier } => {
            let fastest = schedule.fastest_period_ms().unwrap_or(10.0);
            let period = fastest / rate_multiplier.max(1.0);
            let mut t = onset_ms;
            while t < duration_ms {
                frames.push(CanFrame { id: 0x000, payload: vec![0; 8], timestamp_ms: t });
                t += period;
            }
        }
        OnboardAttackMode::CanInjection { target } => {
            let Some(entry) = schedule.entries.iter().find(|e| e.id == *target) else {
                return Ok(frames);
            };
            // Equal-rate injection, phase-shifted by half a period so the
            // merged stream's inter-arrival median halves.
            let mut t = onset_ms + entry.period_ms / 2.0;
            while t < duration_ms {
                frames.push(CanFrame {
                    id: *target,
                    payload: vec![0xAA; entry.payload_len.min(8)],
                    timestamp_ms: t,
                });
                t += entry.period_ms;
            }
        }
        OnboardAttackMode::CanModification { target } => {
            // In-place payload rewrite: frame counts and timing unchanged.
            for f in frames.iter_mut() {
                if f.id == *target && f.timestamp_ms >= onset_ms {
                    f.payload = vec![0xFF; f.payload.len()];
                }
            }
        }
    }
    crate::canbus::sort_frames(&mut frames);
    Ok(frames)
}

//! Deterministic fixed-step world: intersection geometry, actor kinematics,
//! the broadcast bus, sensor snapshots, and the single-threaded agent
//! stepper. Identical configuration and seed yield byte-identical traces.

pub mod bus;
pub mod conflict;
pub mod fixture;
pub mod trace;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::agents::camera::CameraAgent;
use crate::agents::rsu::RsuAgent;
use crate::agents::traffic_light::TrafficLightAgent;
use crate::agents::vehicle::VehicleAgent;
use crate::agents::vru::VruAgent;
use crate::agents::{Command, HmiEntry, TickCtx, TickOut, TruthActor, UwbFix};
use crate::attacks::AttackRuntime;
use crate::messages::{ObjectClass, StationId};
use crate::mitigation::MitigationKind;
use crate::trust::{PermissionSet, Pki, TrustAnchor};
use crate::world::bus::Bus;
use crate::world::fixture::{AttackPlan, OnboardAttackMode, Scenario, STEP_MS};
use crate::world::trace::{digest_hex, Trace, TraceEvent, TraceHeader, TRACE_SCHEMA};

enum AgentSlot {
    Light(TrafficLightAgent),
    Rsu(RsuAgent),
    Vehicle(VehicleAgent),
    Vru(VruAgent),
}

impl AgentSlot {
    fn station(&self) -> StationId {
        match self {
            AgentSlot::Light(a) => a.station,
            AgentSlot::Rsu(a) => a.station,
            AgentSlot::Vehicle(a) => a.station,
            AgentSlot::Vru(a) => a.station,
        }
    }
}

fn derive_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(d[..8].try_into().unwrap()))
}

/// The running simulation.
pub struct World {
    pub scenario: Scenario,
    step: u64,
    bus: Bus,
    anchor: TrustAnchor,
    camera: CameraAgent,
    agents: Vec<AgentSlot>,
    /// Tick order: indexes into `agents`, ascending station id.
    tick_order: Vec<usize>,
    /// Receiver slots in fixture declaration order (stable under station
    /// renaming).
    receiver_slots: Vec<StationId>,
    attack: AttackRuntime,
    uwb_rng: ChaCha8Rng,
    pub trace: Trace,
    pub min_pair_distance: f64,
}

impl World {
    pub fn new(scenario: Scenario) -> Result<World, crate::world::fixture::FixtureError> {
        let pki = Pki::new(scenario.seed ^ 0x5EC0_5EC0);
        let anchor = pki.anchor();

        let mut agents: Vec<AgentSlot> = Vec::new();
        let mut receiver_slots = Vec::new();

        // Vehicles in fixture order.
        for (i, vcfg) in scenario.vehicles.iter().enumerate() {
            let lane = scenario
                .lanes
                .get(&vcfg.lane)
                .expect("validated lane reference")
                .clone();
            let mut permissions = PermissionSet::SEND_CAM.union(PermissionSet::SEND_DENM);
            if vcfg.emit_cpm {
                permissions = permissions.union(PermissionSet::SEND_CPM);
            }
            let hsm = pki.issue_station(vcfg.station, permissions);
            let rng = derive_rng(scenario.seed, "onboard", i as u64);
            let mut vehicle = VehicleAgent::new(vcfg, lane, hsm, rng);
            if let Some(can) = &scenario.can {
                if can.vehicle == vcfg.station {
                    let attack: Option<(&OnboardAttackMode, f64)> = match &scenario.attack {
                        Some(AttackPlan::Onboard { onset_ms, mode, .. }) => {
                            Some((mode, *onset_ms as f64))
                        }
                        _ => None,
                    };
                    vehicle
                        .install_can(
                            &can.schedule,
                            scenario.duration_ms as f64,
                            scenario.seed,
                            attack,
                            can.train_window_ms,
                        )
                        .map_err(|e| crate::world::fixture::FixtureError::Invalid {
                            field: "can.schedule".into(),
                            reason: e.to_string(),
                        })?;
                }
            }
            receiver_slots.push(vcfg.station);
            agents.push(AgentSlot::Vehicle(vehicle));
        }

        // Pedestrians.
        for vcfg in &scenario.vrus {
            receiver_slots.push(vcfg.station);
            agents.push(AgentSlot::Vru(VruAgent::new(vcfg)));
        }

        // RSU.
        let rsu_hsm = pki.issue_station(
            scenario.rsu_station,
            PermissionSet::SEND_CPM.union(PermissionSet::SEND_DENM),
        );
        receiver_slots.push(scenario.rsu_station);
        agents.push(AgentSlot::Rsu(RsuAgent::new(
            scenario.rsu_station,
            rsu_hsm,
            scenario.rsu_position,
            scenario.camera_fov,
            scenario.camera_sigma,
            scenario.conflict_geometry(),
        )));

        // Traffic light.
        let light_hsm = pki.issue_station(
            scenario.light_station,
            PermissionSet::SEND_SPAT.union(PermissionSet::SEND_MAP),
        );
        let groups: Vec<u8> = {
            let mut g: Vec<u8> = scenario.lanes.values().map(|l| l.signal_group).collect();
            g.sort_unstable();
            g.dedup();
            g
        };
        receiver_slots.push(scenario.light_station);
        agents.push(AgentSlot::Light(TrafficLightAgent::new(
            scenario.light_station,
            light_hsm,
            scenario.program.clone(),
            groups,
            scenario.map_payload(),
            scenario.honor_probability,
            derive_rng(scenario.seed, "light-honor", 0),
        )));

        let mut tick_order: Vec<usize> = (0..agents.len()).collect();
        tick_order.sort_by_key(|&i| agents[i].station());

        let camera = CameraAgent::new(
            scenario.camera_fov,
            scenario.camera_sigma,
            scenario.camera_detection_probability,
            scenario.camera_confidence,
            derive_rng(scenario.seed, "camera", 0),
        );

        let header = TraceHeader {
            schema: TRACE_SCHEMA.to_string(),
            fixture: scenario.name.clone(),
            scenario: scenario.kind.label().to_string(),
            seed: scenario.seed,
            step_ms: STEP_MS,
        };

        Ok(World {
            bus: Bus::new(scenario.seed, scenario.loss_probability, scenario.latency_steps),
            anchor,
            camera,
            agents,
            tick_order,
            receiver_slots,
            attack: AttackRuntime::new(scenario.attack.clone()),
            uwb_rng: derive_rng(scenario.seed, "uwb", 0),
            trace: Trace::new(header),
            min_pair_distance: f64::INFINITY,
            step: 0,
            scenario,
        })
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    fn truth(&self, t_ms: u64) -> Vec<TruthActor> {
        let mut out = Vec::new();
        for agent in &self.agents {
            match agent {
                AgentSlot::Vehicle(v) => {
                    if v.active(t_ms) {
                        out.push(TruthActor {
                            station: v.station,
                            class: ObjectClass::Vehicle,
                            state: v.true_state(),
                            uwb_tag: None,
                        });
                    }
                }
                AgentSlot::Vru(v) => out.push(TruthActor {
                    station: v.station,
                    class: ObjectClass::Pedestrian,
                    state: v.true_state(t_ms),
                    uwb_tag: Some(v.tag),
                }),
                _ => {}
            }
        }
        out
    }

    /// Advances the world by one 100 ms step.
    pub fn step(&mut self) {
        let step = self.step;
        let t_ms = step * STEP_MS;

        // Ground truth and sensor snapshots at step start.
        let truth = self.truth(t_ms);
        for actor in &truth {
            self.trace.push(TraceEvent::State {
                step,
                t_ms,
                station: actor.station,
                x: actor.state.x,
                y: actor.state.y,
                speed: actor.state.speed,
                extra: None,
            });
        }
        for (i, a) in truth.iter().enumerate() {
            for b in truth.iter().skip(i + 1) {
                let d = (a.state.x - b.state.x).hypot(a.state.y - b.state.y);
                if d < self.min_pair_distance {
                    self.min_pair_distance = d;
                }
            }
        }

        let (camera_objects, camera_object_stations) = self.camera.observe(&truth, t_ms);

        let mut uwb_fixes: Vec<UwbFix> = Vec::new();
        for actor in &truth {
            if let Some(tag) = actor.uwb_tag {
                if let Ok(fix) = crate::agents::uwb_locate(
                    self.scenario.uwb_anchor,
                    tag,
                    crate::geom::Point::new(actor.state.x, actor.state.y),
                    self.scenario.uwb_range,
                    self.scenario.uwb_sigma,
                    t_ms,
                    &mut self.uwb_rng,
                ) {
                    uwb_fixes.push(fix);
                }
            }
        }

        // Tick agents in ascending station order.
        let mut all_commands: Vec<Command> = Vec::new();
        let order = self.tick_order.clone();
        for idx in order {
            let station = self.agents[idx].station();
            let inbox = self.bus.take_due(station, step);
            let ctx = TickCtx {
                step,
                t_ms,
                inbox,
                truth: &truth,
                anchor: &self.anchor,
                cfg: &self.scenario.detection,
                policy: &self.scenario.policy,
                mitigation_enabled: self.scenario.mitigation_enabled,
                denm_repeat_steps: self.scenario.denm_repeat_steps,
                denm_repeat_duration_ms: self.scenario.denm_repeat_duration_ms,
                camera_objects: &camera_objects,
                camera_object_stations: &camera_object_stations,
                uwb_fixes: &uwb_fixes,
            };
            let out: TickOut = match &mut self.agents[idx] {
                AgentSlot::Light(a) => a.tick(&ctx, &mut self.attack),
                AgentSlot::Rsu(a) => a.tick(&ctx, &mut self.attack),
                AgentSlot::Vehicle(a) => a.tick(&ctx, &mut self.attack),
                AgentSlot::Vru(a) => a.tick(&ctx),
            };
            for event in out.events {
                self.trace.push(event);
            }
            for msg in out.emissions {
                let dropped = self.bus.broadcast(step, Arc::clone(&msg), &self.receiver_slots);
                for d in dropped {
                    self.trace.push(TraceEvent::Drop {
                        step,
                        t_ms,
                        station: d.receiver,
                        from: d.sender,
                        digest: digest_hex(&d.digest),
                    });
                }
            }
            all_commands.extend(out.commands);
        }

        // Resolve deferred cross-agent effects.
        for command in all_commands {
            match command {
                Command::LightOverride { target, requested_by } => {
                    let hacked = self.attack.light_hacked(t_ms);
                    let outcome = self
                        .agents
                        .iter_mut()
                        .find_map(|a| match a {
                            AgentSlot::Light(l) => Some(l.receive_override(target, hacked, t_ms)),
                            _ => None,
                        })
                        .unwrap_or(crate::mitigation::ActionOutcome::Ignored);
                    self.trace.push(TraceEvent::Mitigation {
                        step,
                        t_ms,
                        station: requested_by,
                        action: MitigationKind::RequestLightOverride(target),
                        outcome,
                        detail: None,
                    });
                }
            }
        }

        // Integrate kinematics.
        let dt = STEP_MS as f64 / 1000.0;
        for agent in &mut self.agents {
            match agent {
                AgentSlot::Vehicle(v) => v.integrate(dt, t_ms),
                AgentSlot::Vru(v) => v.integrate(dt, t_ms),
                _ => {}
            }
        }

        self.step += 1;
    }

    /// Runs to the configured duration.
    pub fn run_to_end(&mut self) {
        while self.step < self.scenario.step_count() {
            self.step();
        }
    }

    /// Physical phase of a signal group right now, for invariant checks.
    pub fn physical_phase(&self, group: u8, t_ms: u64) -> Option<crate::messages::PhaseState> {
        self.agents.iter().find_map(|a| match a {
            AgentSlot::Light(l) => Some(l.physical_state(group, t_ms)),
            _ => None,
        })
    }

    /// HMI logs of every station, keyed by station id.
    pub fn hmi_logs(&self) -> BTreeMap<StationId, Vec<HmiEntry>> {
        let mut out = BTreeMap::new();
        for agent in &self.agents {
            match agent {
                AgentSlot::Vehicle(v) => {
                    out.insert(v.station, v.hmi.clone());
                }
                AgentSlot::Rsu(r) => {
                    out.insert(r.station, r.hmi.clone());
                }
                AgentSlot::Vru(v) => {
                    out.insert(v.station, v.handheld.clone());
                }
                AgentSlot::Light(_) => {}
            }
        }
        out
    }

    /// Read access to agents for assertions.
    pub fn vehicle(&self, station: StationId) -> Option<&VehicleAgent> {
        self.agents.iter().find_map(|a| match a {
            AgentSlot::Vehicle(v) if v.station == station => Some(v),
            _ => None,
        })
    }

    pub fn vru(&self, station: StationId) -> Option<&VruAgent> {
        self.agents.iter().find_map(|a| match a {
            AgentSlot::Vru(v) if v.station == station => Some(v),
            _ => None,
        })
    }

    pub fn rsu(&self) -> Option<&RsuAgent> {
        self.agents.iter().find_map(|a| match a {
            AgentSlot::Rsu(r) => Some(r),
            _ => None,
        })
    }
}

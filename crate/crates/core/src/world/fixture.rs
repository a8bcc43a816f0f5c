//! Scenario fixture files: a documented TOML schema describing the
//! intersection geometry, the actors and their scripts, the attack to
//! inject, and detector/mitigation tuning. Parsing is strict (unknown keys
//! are errors) and validation failures carry the offending field.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{chi2_quantile, DetectionConfig, GateConfig};
use crate::geom::{Point, Polyline};
use crate::messages::{Approach, MapLane, MapPayload, StationId};
use crate::mitigation::{MitigationPolicy, PolicyError};

pub const FIXTURE_SCHEMA: &str = "v2x-sentinel-fixture/1";
/// The simulation step is fixed; fixtures may state it but not change it.
pub const STEP_MS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Clean,
    S1,
    S2,
    S3,
    S4,
    S5,
}

impl ScenarioKind {
    pub fn label(&self) -> &'static str {
        match self {
            ScenarioKind::Clean => "clean",
            ScenarioKind::S1 => "s1",
            ScenarioKind::S2 => "s2",
            ScenarioKind::S3 => "s3",
            ScenarioKind::S4 => "s4",
            ScenarioKind::S5 => "s5",
        }
    }
}

#[derive(Debug, Clone, Error)]
pub enum FixtureError {
    #[error("fixture parse error: {0}")]
    Parse(String),
    #[error("fixture validation error at `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("mitigation policy error: {0}")]
    Policy(#[from] PolicyError),
    #[error("io error: {0}")]
    Io(String),
}

fn invalid(field: &str, reason: impl Into<String>) -> FixtureError {
    FixtureError::Invalid { field: field.to_string(), reason: reason.into() }
}

// ---------------------------------------------------------------------------
// Raw file schema (serde view of the TOML).
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureFile {
    pub schema: String,
    pub name: String,
    pub sim: SimSection,
    pub geometry: GeometrySection,
    pub rsu: RsuSection,
    pub traffic_light: TrafficLightSection,
    pub camera: CameraSection,
    #[serde(default)]
    pub uwb: Option<UwbSection>,
    #[serde(default)]
    pub vehicles: Vec<VehicleSection>,
    #[serde(default)]
    pub vrus: Vec<VruSection>,
    #[serde(default)]
    pub can: Option<CanSection>,
    #[serde(default)]
    pub attack: Option<AttackSection>,
    #[serde(default)]
    pub detection: Option<DetectionSection>,
    #[serde(default)]
    pub mitigation: Option<MitigationSection>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub duration_ms: u64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub loss_probability: f64,
    #[serde(default)]
    pub latency_steps: u64,
    pub scenario: ScenarioKind,
    #[serde(default)]
    pub step_ms: Option<u64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub lanes: Vec<LaneSection>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LaneSection {
    pub id: u16,
    pub ingress: String,
    pub egress: String,
    pub signal_group: u8,
    /// Full driving path as `[[x, y], ...]`, spawn end first.
    pub path: Vec<[f64; 2]>,
    /// Arc length of the stop line along `path`.
    pub stop_line_s: f64,
    /// Arc length where the connection leaves the intersection box.
    pub exit_s: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RsuSection {
    pub station: u32,
    pub position: [f64; 2],
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficLightSection {
    pub station: u32,
    #[serde(default = "default_honor")]
    pub honor_probability: f64,
    pub program: Vec<ProgramInterval>,
}

fn default_honor() -> f64 {
    0.0
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramInterval {
    pub greens: Vec<u8>,
    pub green_ms: u64,
    #[serde(default = "default_yellow")]
    pub yellow_ms: u64,
    #[serde(default = "default_all_red")]
    pub all_red_ms: u64,
}

fn default_yellow() -> u64 {
    2000
}

fn default_all_red() -> u64 {
    1000
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSection {
    #[serde(default = "default_sigma_cam")]
    pub sigma_pos: f64,
    #[serde(default = "default_det_prob")]
    pub detection_probability: f64,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    pub fov: FovSection,
}

fn default_sigma_cam() -> f64 {
    0.5
}

fn default_det_prob() -> f64 {
    0.98
}

fn default_confidence() -> f64 {
    0.95
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FovSection {
    pub origin: [f64; 2],
    pub orientation: f64,
    pub range: f64,
    pub half_angle: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct UwbSection {
    #[serde(default = "default_uwb_sigma")]
    pub sigma: f64,
    #[serde(default = "default_uwb_range")]
    pub range: f64,
    #[serde(default)]
    pub anchor: Option<[f64; 2]>,
}

fn default_uwb_sigma() -> f64 {
    0.3
}

fn default_uwb_range() -> f64 {
    100.0
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSection {
    pub station: u32,
    pub lane: u16,
    #[serde(default)]
    pub spawn_s: f64,
    pub target_speed: f64,
    #[serde(default)]
    pub start_ms: u64,
    #[serde(default)]
    pub onboard: Option<OnboardSection>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OnboardSection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_onboard_range")]
    pub range: f64,
    #[serde(default = "default_onboard_half_angle")]
    pub half_angle: f64,
    #[serde(default = "default_onboard_sigma")]
    pub sigma_pos: f64,
    #[serde(default)]
    pub emit_cpm: bool,
}

fn default_true() -> bool {
    true
}

fn default_onboard_range() -> f64 {
    80.0
}

fn default_onboard_half_angle() -> f64 {
    1.0
}

fn default_onboard_sigma() -> f64 {
    0.25
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct VruSection {
    pub station: u32,
    pub tag: u32,
    pub path: Vec<[f64; 2]>,
    pub speed: f64,
    #[serde(default)]
    pub start_ms: u64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CanSection {
    /// Station of the vehicle carrying this bus.
    pub vehicle: u32,
    #[serde(default = "default_train_window")]
    pub train_window_ms: u64,
    pub schedule: Vec<CanScheduleSection>,
}

fn default_train_window() -> u64 {
    10_000
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CanScheduleSection {
    pub id: u16,
    pub period_ms: f64,
    #[serde(default)]
    pub jitter_ms: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub onset_ms: u64,
    /// Scenario-specific mode, see the per-scenario validation.
    pub mode: String,
    #[serde(default)]
    pub target_station: Option<u32>,
    #[serde(default)]
    pub ghost_position: Option<[f64; 2]>,
    #[serde(default)]
    pub pair: Option<[u8; 2]>,
    #[serde(default)]
    pub rate_multiplier: Option<f64>,
    #[serde(default)]
    pub can_target: Option<u16>,
}

#[derive(Debug, Clone, Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DetectionSection {
    #[serde(default)]
    pub nis_quantile: Option<f64>,
    #[serde(default)]
    pub window_k: Option<u32>,
    #[serde(default)]
    pub process_noise_q: Option<f64>,
    #[serde(default)]
    pub cpm_sigma: Option<f64>,
    #[serde(default)]
    pub r_assoc: Option<f64>,
    #[serde(default)]
    pub r_dup: Option<f64>,
    #[serde(default)]
    pub speed_window: Option<usize>,
    #[serde(default)]
    pub collision_horizon_s: Option<f64>,
    #[serde(default)]
    pub collision_dmin: Option<f64>,
    #[serde(default)]
    pub report_holdoff_ms: Option<u64>,
}

#[derive(Debug, Clone, Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MitigationSection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default)]
    pub denm_repeat_steps: Option<u64>,
    #[serde(default)]
    pub denm_repeat_duration_ms: Option<u64>,
}

// ---------------------------------------------------------------------------
// Validated runtime scenario.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LaneDef {
    pub id: u16,
    pub ingress: Approach,
    pub egress: Approach,
    pub signal_group: u8,
    pub path: Polyline,
    pub stop_line_s: f64,
    pub exit_s: f64,
}

impl LaneDef {
    /// Centerline of the connection through the intersection box, the part
    /// that participates in conflict derivation.
    pub fn conflict_centerline(&self) -> Polyline {
        self.path.clipped(self.stop_line_s, self.exit_s)
    }
}

#[derive(Debug, Clone)]
pub struct VehicleCfg {
    pub station: StationId,
    pub lane: u16,
    pub spawn_s: f64,
    pub target_speed: f64,
    pub start_ms: u64,
    pub onboard_enabled: bool,
    pub onboard_range: f64,
    pub onboard_half_angle: f64,
    pub onboard_sigma: f64,
    pub emit_cpm: bool,
}

#[derive(Debug, Clone)]
pub struct VruCfg {
    pub station: StationId,
    pub tag: u32,
    pub path: Polyline,
    pub speed: f64,
    pub start_ms: u64,
}

#[derive(Debug, Clone)]
pub struct CanCfg {
    pub vehicle: StationId,
    pub train_window_ms: u64,
    pub schedule: crate::canbus::CanSchedule,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CpmAttackMode {
    Falsify { target: StationId },
    Ghost { position: Point },
    Suppress { target: StationId },
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpatAttackMode {
    AllGreen,
    ConflictingPair(u8, u8),
}

#[derive(Debug, Clone, PartialEq)]
pub enum OnboardAttackMode {
    Compromise,
    CanDos { rate_multiplier: f64 },
    CanInjection { target: u16 },
    CanModification { target: u16 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackPlan {
    MaliciousCpm { onset_ms: u64, mode: CpmAttackMode },
    HackedVehicle { onset_ms: u64, target: StationId },
    HackedSpat { onset_ms: u64, mode: SpatAttackMode },
    VruThreat { onset_ms: u64, target: StationId },
    Onboard { onset_ms: u64, target: StationId, mode: OnboardAttackMode },
}

impl AttackPlan {
    pub fn onset_ms(&self) -> u64 {
        match self {
            AttackPlan::MaliciousCpm { onset_ms, .. }
            | AttackPlan::HackedVehicle { onset_ms, .. }
            | AttackPlan::HackedSpat { onset_ms, .. }
            | AttackPlan::VruThreat { onset_ms, .. }
            | AttackPlan::Onboard { onset_ms, .. } => *onset_ms,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub kind: ScenarioKind,
    pub duration_ms: u64,
    pub seed: u64,
    pub loss_probability: f64,
    pub latency_steps: u64,
    pub lanes: BTreeMap<u16, LaneDef>,
    pub rsu_station: StationId,
    pub rsu_position: Point,
    pub light_station: StationId,
    pub honor_probability: f64,
    pub program: Vec<ProgramInterval>,
    pub camera_sigma: f64,
    pub camera_detection_probability: f64,
    pub camera_confidence: f64,
    pub camera_fov: crate::messages::FieldOfView,
    pub uwb_sigma: f64,
    pub uwb_range: f64,
    pub uwb_anchor: Point,
    pub vehicles: Vec<VehicleCfg>,
    pub vrus: Vec<VruCfg>,
    pub can: Option<CanCfg>,
    pub attack: Option<AttackPlan>,
    pub detection: DetectionConfig,
    pub mitigation_enabled: bool,
    pub denm_repeat_steps: u64,
    pub denm_repeat_duration_ms: u64,
    pub policy: MitigationPolicy,
}

impl Scenario {
    pub fn step_count(&self) -> u64 {
        self.duration_ms / STEP_MS
    }

    pub fn onset_step(&self) -> Option<u64> {
        self.attack.as_ref().map(|a| a.onset_ms() / STEP_MS)
    }

    /// The MAP payload the traffic light broadcasts for this intersection.
    pub fn map_payload(&self) -> MapPayload {
        MapPayload {
            sender: self.light_station,
            lanes: self
                .lanes
                .values()
                .map(|l| MapLane {
                    lane_id: l.id,
                    ingress: l.ingress,
                    egress: l.egress,
                    signal_group: l.signal_group,
                })
                .collect(),
        }
    }

    /// Conflict centerlines keyed by lane id.
    pub fn conflict_geometry(&self) -> BTreeMap<u16, Polyline> {
        self.lanes.iter().map(|(id, l)| (*id, l.conflict_centerline())).collect()
    }

    /// Applies a station-id permutation; used to verify that processing
    /// order does not leak into detection results.
    pub fn remap_stations(&mut self, f: impl Fn(StationId) -> StationId) {
        self.rsu_station = f(self.rsu_station);
        self.light_station = f(self.light_station);
        for v in &mut self.vehicles {
            v.station = f(v.station);
        }
        for v in &mut self.vrus {
            v.station = f(v.station);
        }
        if let Some(can) = &mut self.can {
            can.vehicle = f(can.vehicle);
        }
        if let Some(attack) = &mut self.attack {
            match attack {
                AttackPlan::MaliciousCpm { mode, .. } => match mode {
                    CpmAttackMode::Falsify { target } | CpmAttackMode::Suppress { target } => {
                        *target = f(*target);
                    }
                    CpmAttackMode::Ghost { .. } => {}
                },
                AttackPlan::HackedVehicle { target, .. }
                | AttackPlan::VruThreat { target, .. } => {
                    *target = f(*target);
                }
                AttackPlan::Onboard { target, .. } => {
                    *target = f(*target);
                }
                AttackPlan::HackedSpat { .. } => {}
            }
        }
    }
}

fn parse_approach(s: &str, field: &str) -> Result<Approach, FixtureError> {
    match s {
        "N" => Ok(Approach::N),
        "E" => Ok(Approach::E),
        "S" => Ok(Approach::S),
        "W" => Ok(Approach::W),
        other => Err(invalid(field, format!("unknown approach `{other}` (want N/E/S/W)"))),
    }
}

impl FixtureFile {
    pub fn parse(text: &str) -> Result<FixtureFile, FixtureError> {
        toml::from_str(text).map_err(|e| FixtureError::Parse(e.to_string()))
    }

    /// Full validation into a runtime scenario. `seed_fallback` fills in
    /// when neither the fixture nor an override provides one.
    pub fn validate(&self, seed_fallback: Option<u64>) -> Result<Scenario, FixtureError> {
        if self.schema != FIXTURE_SCHEMA {
            return Err(invalid(
                "schema",
                format!("expected `{FIXTURE_SCHEMA}`, found `{}`", self.schema),
            ));
        }
        if let Some(step) = self.sim.step_ms {
            if step != STEP_MS {
                return Err(invalid("sim.step_ms", format!("step is fixed at {STEP_MS} ms")));
            }
        }
        if self.sim.duration_ms == 0 || self.sim.duration_ms % STEP_MS != 0 {
            return Err(invalid("sim.duration_ms", "must be a positive multiple of 100"));
        }
        if !(0.0..1.0).contains(&self.sim.loss_probability) {
            return Err(invalid("sim.loss_probability", "must be in [0, 1)"));
        }

        // Geometry.
        let mut lanes = BTreeMap::new();
        for (i, l) in self.geometry.lanes.iter().enumerate() {
            let field = format!("geometry.lanes[{i}]");
            if l.path.len() < 2 {
                return Err(invalid(&field, "path needs at least two points"));
            }
            let path = Polyline::new(l.path.iter().map(|p| Point::new(p[0], p[1])).collect());
            let len = path.length();
            if !(l.stop_line_s > 0.0 && l.stop_line_s < l.exit_s && l.exit_s <= len + 1e-9) {
                return Err(invalid(
                    &field,
                    format!(
                        "need 0 < stop_line_s < exit_s <= path length ({:.1}), got {} / {}",
                        len, l.stop_line_s, l.exit_s
                    ),
                ));
            }
            let def = LaneDef {
                id: l.id,
                ingress: parse_approach(&l.ingress, &format!("{field}.ingress"))?,
                egress: parse_approach(&l.egress, &format!("{field}.egress"))?,
                signal_group: l.signal_group,
                path,
                stop_line_s: l.stop_line_s,
                exit_s: l.exit_s,
            };
            if lanes.insert(l.id, def).is_some() {
                return Err(invalid(&field, format!("duplicate lane id {}", l.id)));
            }
        }
        if lanes.is_empty() {
            return Err(invalid("geometry.lanes", "at least one lane required"));
        }
        let groups: Vec<u8> = {
            let mut g: Vec<u8> = lanes.values().map(|l| l.signal_group).collect();
            g.sort_unstable();
            g.dedup();
            g
        };

        // Traffic light program.
        if self.traffic_light.program.is_empty() {
            return Err(invalid("traffic_light.program", "at least one interval required"));
        }
        for (i, interval) in self.traffic_light.program.iter().enumerate() {
            for g in &interval.greens {
                if !groups.contains(g) {
                    return Err(invalid(
                        &format!("traffic_light.program[{i}]"),
                        format!("signal group {g} governs no lane"),
                    ));
                }
            }
            if interval.green_ms == 0 {
                return Err(invalid(&format!("traffic_light.program[{i}].green_ms"), "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.traffic_light.honor_probability) {
            return Err(invalid("traffic_light.honor_probability", "must be in [0, 1]"));
        }

        // Stations must be unique and nonzero.
        let mut stations: Vec<u32> = vec![self.rsu.station, self.traffic_light.station];
        stations.extend(self.vehicles.iter().map(|v| v.station));
        stations.extend(self.vrus.iter().map(|v| v.station));
        if stations.iter().any(|&s| s == 0) {
            return Err(invalid("stations", "station id 0 is reserved"));
        }
        let mut sorted = stations.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != stations.len() {
            return Err(invalid("stations", "station ids must be unique"));
        }

        // Camera.
        if self.camera.sigma_pos < 0.0 {
            return Err(invalid("camera.sigma_pos", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.camera.detection_probability) {
            return Err(invalid("camera.detection_probability", "must be in [0, 1]"));
        }
        let camera_fov = crate::messages::FieldOfView {
            origin_x: self.camera.fov.origin[0],
            origin_y: self.camera.fov.origin[1],
            orientation: self.camera.fov.orientation,
            range: self.camera.fov.range,
            half_angle: self.camera.fov.half_angle,
        };

        // Vehicles.
        let mut vehicles = Vec::new();
        for (i, v) in self.vehicles.iter().enumerate() {
            let field = format!("vehicles[{i}]");
            let lane = lanes
                .get(&v.lane)
                .ok_or_else(|| invalid(&field, format!("unknown lane {}", v.lane)))?;
            if v.spawn_s >= lane.stop_line_s {
                return Err(invalid(&field, "spawn_s must be before the stop line"));
            }
            if !(0.0..=100.0).contains(&v.target_speed) {
                return Err(invalid(&field, "target_speed out of [0, 100]"));
            }
            let ob = v.onboard.clone().unwrap_or(OnboardSection {
                enabled: false,
                range: default_onboard_range(),
                half_angle: default_onboard_half_angle(),
                sigma_pos: default_onboard_sigma(),
                emit_cpm: false,
            });
            vehicles.push(VehicleCfg {
                station: StationId(v.station),
                lane: v.lane,
                spawn_s: v.spawn_s,
                target_speed: v.target_speed,
                start_ms: v.start_ms,
                onboard_enabled: ob.enabled,
                onboard_range: ob.range,
                onboard_half_angle: ob.half_angle,
                onboard_sigma: ob.sigma_pos,
                emit_cpm: ob.emit_cpm,
            });
        }

        // Pedestrians.
        let mut vrus = Vec::new();
        for (i, v) in self.vrus.iter().enumerate() {
            let field = format!("vrus[{i}]");
            if v.path.len() < 2 {
                return Err(invalid(&field, "path needs at least two points"));
            }
            if !(0.0 < v.speed && v.speed <= 3.0) {
                return Err(invalid(&field, "walking speed must be in (0, 3] m/s"));
            }
            vrus.push(VruCfg {
                station: StationId(v.station),
                tag: v.tag,
                path: Polyline::new(v.path.iter().map(|p| Point::new(p[0], p[1])).collect()),
                speed: v.speed,
                start_ms: v.start_ms,
            });
        }

        // CAN.
        let can = match &self.can {
            None => None,
            Some(c) => {
                if !vehicles.iter().any(|v| v.station.0 == c.vehicle) {
                    return Err(invalid("can.vehicle", "must name a configured vehicle"));
                }
                let schedule = crate::canbus::CanSchedule {
                    entries: c
                        .schedule
                        .iter()
                        .map(|e| crate::canbus::ScheduleEntry {
                            id: e.id,
                            period_ms: e.period_ms,
                            jitter_ms: e.jitter_ms,
                            payload: crate::canbus::PayloadKind::Counter,
                            payload_len: 8,
                        })
                        .collect(),
                };
                schedule
                    .validate()
                    .map_err(|e| invalid("can.schedule", e.to_string()))?;
                Some(CanCfg {
                    vehicle: StationId(c.vehicle),
                    train_window_ms: c.train_window_ms,
                    schedule,
                })
            }
        };

        // Attack plan.
        let attack = self.validate_attack(&vehicles, &vrus, &groups, can.as_ref())?;

        // Detection tuning.
        let d = self.detection.clone().unwrap_or_default();
        let gate = GateConfig {
            nis_threshold: chi2_quantile(d.nis_quantile.unwrap_or(0.99), 2.0),
            window_k: d.window_k.unwrap_or(3),
            process_noise_q: d.process_noise_q.unwrap_or(0.5),
            warmup_updates: 5,
        };
        let defaults = DetectionConfig::default();
        let detection = DetectionConfig {
            gate,
            r_assoc: d.r_assoc.unwrap_or(defaults.r_assoc),
            r_dup: d.r_dup.unwrap_or(defaults.r_dup),
            window_k: d.window_k.unwrap_or(defaults.window_k),
            speed_window: d.speed_window.unwrap_or(defaults.speed_window),
            cpm_sigma: d.cpm_sigma.unwrap_or(self.camera.sigma_pos),
            collision_horizon_s: d.collision_horizon_s.unwrap_or(defaults.collision_horizon_s),
            collision_dmin: d.collision_dmin.unwrap_or(defaults.collision_dmin),
            report_holdoff_ms: d.report_holdoff_ms.unwrap_or(defaults.report_holdoff_ms),
            ..defaults
        };

        let mitigation = self.mitigation.clone().unwrap_or(MitigationSection {
            enabled: true,
            denm_repeat_steps: None,
            denm_repeat_duration_ms: None,
        });
        let policy = MitigationPolicy::default();
        policy.validate_total()?;

        let seed = self.sim.seed.or(seed_fallback).unwrap_or(0);

        Ok(Scenario {
            name: self.name.clone(),
            kind: self.sim.scenario,
            duration_ms: self.sim.duration_ms,
            seed,
            loss_probability: self.sim.loss_probability,
            latency_steps: self.sim.latency_steps,
            lanes,
            rsu_station: StationId(self.rsu.station),
            rsu_position: Point::new(self.rsu.position[0], self.rsu.position[1]),
            light_station: StationId(self.traffic_light.station),
            honor_probability: self.traffic_light.honor_probability,
            program: self.traffic_light.program.clone(),
            camera_sigma: self.camera.sigma_pos,
            camera_detection_probability: self.camera.detection_probability,
            camera_confidence: self.camera.confidence,
            camera_fov,
            uwb_sigma: self.uwb.as_ref().map_or(default_uwb_sigma(), |u| u.sigma),
            uwb_range: self.uwb.as_ref().map_or(default_uwb_range(), |u| u.range),
            uwb_anchor: self
                .uwb
                .as_ref()
                .and_then(|u| u.anchor)
                .map(|a| Point::new(a[0], a[1]))
                .unwrap_or_else(|| Point::new(self.rsu.position[0], self.rsu.position[1])),
            vehicles,
            vrus,
            can,
            attack,
            detection,
            mitigation_enabled: mitigation.enabled,
            denm_repeat_steps: mitigation
                .denm_repeat_steps
                .unwrap_or(crate::mitigation::DENM_REPEAT_EVERY_STEPS),
            denm_repeat_duration_ms: mitigation
                .denm_repeat_duration_ms
                .unwrap_or(crate::mitigation::DENM_REPEAT_DURATION_MS),
            policy,
        })
    }

    fn validate_attack(
        &self,
        vehicles: &[VehicleCfg],
        vrus: &[VruCfg],
        groups: &[u8],
        can: Option<&CanCfg>,
    ) -> Result<Option<AttackPlan>, FixtureError> {
        let kind = self.sim.scenario;
        let Some(a) = &self.attack else {
            if kind == ScenarioKind::Clean {
                return Ok(None);
            }
            return Err(invalid("attack", format!("scenario {} requires an attack section", kind.label())));
        };
        if kind == ScenarioKind::Clean {
            // Attack section present but scenario forced clean: used for
            // clean-prefix comparisons.
            return Ok(None);
        }
        if a.onset_ms >= self.sim.duration_ms {
            return Err(invalid("attack.onset_ms", "onset past scenario end"));
        }
        let vehicle_target = |field: &str| -> Result<StationId, FixtureError> {
            let t = a.target_station.ok_or_else(|| invalid(field, "target_station required"))?;
            vehicles
                .iter()
                .find(|v| v.station.0 == t)
                .map(|v| v.station)
                .ok_or_else(|| invalid(field, format!("station {t} is not a vehicle")))
        };
        let plan = match kind {
            ScenarioKind::Clean => unreachable!(),
            ScenarioKind::S1 => {
                let mode = match a.mode.as_str() {
                    "falsify" => {
                        let t = a
                            .target_station
                            .ok_or_else(|| invalid("attack.target_station", "required for falsify"))?;
                        let station = vrus
                            .iter()
                            .map(|v| v.station)
                            .chain(vehicles.iter().map(|v| v.station))
                            .find(|s| s.0 == t)
                            .ok_or_else(|| invalid("attack.target_station", "unknown actor"))?;
                        CpmAttackMode::Falsify { target: station }
                    }
                    "ghost" => {
                        let p = a
                            .ghost_position
                            .ok_or_else(|| invalid("attack.ghost_position", "required for ghost"))?;
                        CpmAttackMode::Ghost { position: Point::new(p[0], p[1]) }
                    }
                    "suppress" => CpmAttackMode::Suppress { target: vehicle_target("attack.target_station")? },
                    other => return Err(invalid("attack.mode", format!("unknown s1 mode `{other}`"))),
                };
                AttackPlan::MaliciousCpm { onset_ms: a.onset_ms, mode }
            }
            ScenarioKind::S2 => AttackPlan::HackedVehicle {
                onset_ms: a.onset_ms,
                target: vehicle_target("attack.target_station")?,
            },
            ScenarioKind::S3 => {
                let mode = match a.mode.as_str() {
                    "all_green" => SpatAttackMode::AllGreen,
                    "conflicting_pair" => {
                        let p = a.pair.ok_or_else(|| invalid("attack.pair", "required"))?;
                        for g in p {
                            if !groups.contains(&g) {
                                return Err(invalid("attack.pair", format!("unknown group {g}")));
                            }
                        }
                        SpatAttackMode::ConflictingPair(p[0], p[1])
                    }
                    other => return Err(invalid("attack.mode", format!("unknown s3 mode `{other}`"))),
                };
                AttackPlan::HackedSpat { onset_ms: a.onset_ms, mode }
            }
            ScenarioKind::S4 => {
                if vrus.is_empty() {
                    return Err(invalid("vrus", "s4 needs at least one pedestrian"));
                }
                AttackPlan::VruThreat {
                    onset_ms: a.onset_ms,
                    target: vehicle_target("attack.target_station")?,
                }
            }
            ScenarioKind::S5 => {
                let mode = match a.mode.as_str() {
                    "compromise" => OnboardAttackMode::Compromise,
                    "can_dos" => OnboardAttackMode::CanDos {
                        rate_multiplier: a.rate_multiplier.unwrap_or(10.0),
                    },
                    "can_injection" => OnboardAttackMode::CanInjection {
                        target: a.can_target.ok_or_else(|| invalid("attack.can_target", "required"))?,
                    },
                    "can_modification" => OnboardAttackMode::CanModification {
                        target: a.can_target.ok_or_else(|| invalid("attack.can_target", "required"))?,
                    },
                    other => return Err(invalid("attack.mode", format!("unknown s5 mode `{other}`"))),
                };
                if matches!(
                    mode,
                    OnboardAttackMode::CanDos { .. }
                        | OnboardAttackMode::CanInjection { .. }
                        | OnboardAttackMode::CanModification { .. }
                ) && can.is_none()
                {
                    return Err(invalid("can", "CAN attack modes need a [can] section"));
                }
                // The compromised platform: explicit target, or the vehicle
                // carrying the monitored bus.
                let target = match a.target_station {
                    Some(t) => vehicles
                        .iter()
                        .find(|v| v.station.0 == t)
                        .map(|v| v.station)
                        .ok_or_else(|| {
                            invalid("attack.target_station", format!("station {t} is not a vehicle"))
                        })?,
                    None => can
                        .map(|c| c.vehicle)
                        .ok_or_else(|| invalid("attack.target_station", "required without [can]"))?,
                };
                if let Some(c) = can {
                    if a.onset_ms < c.train_window_ms
                        && !matches!(mode, OnboardAttackMode::Compromise)
                    {
                        return Err(invalid(
                            "attack.onset_ms",
                            "CAN attack onset must come after the training window",
                        ));
                    }
                }
                AttackPlan::Onboard { onset_ms: a.onset_ms, target, mode }
            }
        };
        Ok(Some(plan))
    }
}

/// Parses a fixture file with `--set key=value` style dotted-path overrides
/// applied before validation.
pub fn load_fixture(
    text: &str,
    overrides: &[(String, String)],
    seed_fallback: Option<u64>,
) -> Result<Scenario, FixtureError> {
    let mut value: toml::Value =
        toml::from_str(text).map_err(|e| FixtureError::Parse(e.to_string()))?;
    for (path, raw) in overrides {
        apply_override(&mut value, path, raw)?;
    }
    let file: FixtureFile = value
        .try_into()
        .map_err(|e: toml::de::Error| FixtureError::Parse(e.to_string()))?;
    file.validate(seed_fallback)
}

fn apply_override(root: &mut toml::Value, path: &str, raw: &str) -> Result<(), FixtureError> {
    let parsed: toml::Value = {
        // Accept bare strings as a convenience: `--set sim.scenario=clean`.
        let attempt = format!("v = {raw}");
        match toml::from_str::<toml::Table>(&attempt) {
            Ok(t) => t["v"].clone(),
            Err(_) => toml::Value::String(raw.to_string()),
        }
    };
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if last {
            match cursor {
                toml::Value::Table(t) => {
                    t.insert(part.to_string(), parsed);
                    return Ok(());
                }
                _ => {
                    return Err(invalid(path, "override path does not address a table"));
                }
            }
        }
        cursor = match cursor {
            toml::Value::Table(t) => t
                .entry(part.to_string())
                .or_insert(toml::Value::Table(toml::Table::new())),
            _ => return Err(invalid(path, "override path does not address a table")),
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_fixture() -> String {
        r#"
schema = "v2x-sentinel-fixture/1"
name = "test"

[sim]
duration_ms = 5000
seed = 1
scenario = "clean"

[[geometry.lanes]]
id = 1
ingress = "N"
egress = "S"
signal_group = 0
path = [[-4.0, 115.0], [-4.0, -115.0]]
stop_line_s = 100.0
exit_s = 127.0

[rsu]
station = 2
position = [20.0, 20.0]

[traffic_light]
station = 3
[[traffic_light.program]]
greens = [0]
green_ms = 10000

[camera]
fov = { origin = [0.0, 0.0], orientation = 0.0, range = 300.0, half_angle = 3.141592653589793 }

[[vehicles]]
station = 11
lane = 1
target_speed = 10.0
"#
        .to_string()
    }

    #[test]
    fn minimal_fixture_validates() {
        let scn = load_fixture(&minimal_fixture(), &[], None).unwrap();
        assert_eq!(scn.kind, ScenarioKind::Clean);
        assert_eq!(scn.step_count(), 50);
        assert_eq!(scn.vehicles.len(), 1);
        assert!((scn.detection.gate.nis_threshold - 9.21034).abs() < 1e-4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = minimal_fixture().replace("[sim]", "[sim]\nbogus_key = 3");
        assert!(matches!(load_fixture(&text, &[], None), Err(FixtureError::Parse(_))));
    }

    #[test]
    fn overrides_apply_before_validation() {
        let scn =
            load_fixture(&minimal_fixture(), &[("sim.seed".into(), "42".into())], None).unwrap();
        assert_eq!(scn.seed, 42);
        let scn2 = load_fixture(
            &minimal_fixture(),
            &[("camera.sigma_pos".into(), "0.25".into())],
            None,
        )
        .unwrap();
        assert!((scn2.camera_sigma - 0.25).abs() < 1e-12);
    }

    #[test]
    fn seed_fallback_is_lowest_precedence() {
        let no_seed = minimal_fixture().replace("seed = 1\n", "");
        let scn = load_fixture(&no_seed, &[], Some(77)).unwrap();
        assert_eq!(scn.seed, 77);
        // Fixture seed wins over fallback.
        let scn2 = load_fixture(&minimal_fixture(), &[], Some(77)).unwrap();
        assert_eq!(scn2.seed, 1);
    }

    #[test]
    fn attack_scenario_requires_attack_section() {
        let text = minimal_fixture().replace("scenario = \"clean\"", "scenario = \"s3\"");
        let err = load_fixture(&text, &[], None).unwrap_err();
        assert!(matches!(err, FixtureError::Invalid { .. }), "{err}");
    }

    #[test]
    fn program_groups_must_exist() {
        let text = minimal_fixture().replace("greens = [0]", "greens = [0, 9]");
        let err = load_fixture(&text, &[], None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("governs no lane"), "{msg}");
    }

    #[test]
    fn bad_loss_probability_rejected() {
        let err = load_fixture(
            &minimal_fixture(),
            &[("sim.loss_probability".into(), "1.0".into())],
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("loss_probability"), "{err}");
    }

    #[test]
    fn vru_speed_bounded() {
        let text = minimal_fixture()
            + r#"
[[vrus]]
station = 30
tag = 1
path = [[-8.0, 103.0], [8.0, 103.0]]
speed = 4.0
"#;
        let err = load_fixture(&text, &[], None).unwrap_err();
        assert!(err.to_string().contains("walking speed"), "{err}");
    }

    #[test]
    fn scenario_forced_clean_ignores_attack() {
        let text = minimal_fixture().replace("scenario = \"clean\"", "scenario = \"s3\"")
            + r#"
[attack]
onset_ms = 1000
mode = "all_green"
"#;
        let scn =
            load_fixture(&text, &[("sim.scenario".into(), "\"clean\"".into())], None).unwrap();
        assert!(scn.attack.is_none());
        assert_eq!(scn.kind, ScenarioKind::Clean);
    }
}

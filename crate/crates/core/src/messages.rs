//! V2X payload types and the canonical binary codec.
//!
//! Every payload encodes to a deterministic, self-describing byte string:
//! one type-tag byte, then fixed-width little-endian fields in declaration
//! order. Lists carry a 16-bit element count prefix and reals are IEEE-754
//! binary64. Signatures are computed over exactly these bytes, so the format
//! is a wire contract: stable within a major release.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{wrap_diff, TAU};

/// Half-extent of the simulation region in meters.
pub const REGION_BOUND: f64 = 500.0;

pub const TAG_CAM: u8 = 0x01;
pub const TAG_CPM: u8 = 0x02;
pub const TAG_DENM: u8 = 0x03;
pub const TAG_SPAT: u8 = 0x04;
pub const TAG_MAP: u8 = 0x05;
/// Tag used by the trust module for certificates.
pub const TAG_CERTIFICATE: u8 = 0x10;
/// Tag used by the trust module for signed envelopes.
pub const TAG_SIGNED: u8 = 0x11;

pub const MAX_CPM_OBJECTS: usize = 128;

/// Identifier of a pseudonym identity. One physical actor may hold several
/// over its lifetime; 0 is reserved for "unknown" and never sends.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct StationId(pub u32);

impl StationId {
    pub const UNKNOWN: StationId = StationId(0);

    pub fn is_unknown(&self) -> bool {
        self.0 == 0
    }
}

impl std::fmt::Display for StationId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Planar pose and motion of any actor; the common currency of all
/// plausibility checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    /// East offset from the intersection center, meters.
    pub x: f64,
    /// North offset from the intersection center, meters.
    pub y: f64,
    /// Heading in radians, `[0, 2*pi)`, 0 = east.
    pub heading: f64,
    /// Speed along heading, m/s, non-negative.
    pub speed: f64,
    /// Signed acceleration along heading, m/s^2.
    pub accel: f64,
}

impl KinematicState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64, accel: f64) -> Self {
        Self { x, y, heading, speed, accel }
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.speed * self.heading.cos(), self.speed * self.heading.sin())
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let finite = self.x.is_finite()
            && self.y.is_finite()
            && self.heading.is_finite()
            && self.speed.is_finite()
            && self.accel.is_finite();
        if !finite {
            return Err(CodecError::invariant("kinematic state has non-finite field"));
        }
        if !(-REGION_BOUND..=REGION_BOUND).contains(&self.x)
            || !(-REGION_BOUND..=REGION_BOUND).contains(&self.y)
        {
            return Err(CodecError::invariant("position outside simulation region"));
        }
        if !(0.0..TAU).contains(&self.heading) {
            return Err(CodecError::invariant("heading outside [0, 2pi)"));
        }
        if !(0.0..=100.0).contains(&self.speed) {
            return Err(CodecError::invariant("speed outside [0, 100]"));
        }
        if self.accel.abs() > 20.0 {
            return Err(CodecError::invariant("|accel| above 20"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Vehicle,
    Pedestrian,
    Cyclist,
    Unknown,
}

impl ObjectClass {
    fn to_byte(self) -> u8 {
        match self {
            ObjectClass::Vehicle => 0,
            ObjectClass::Pedestrian => 1,
            ObjectClass::Cyclist => 2,
            ObjectClass::Unknown => 3,
        }
    }

    fn from_byte(b: u8) -> Result<Self, CodecError> {
        Ok(match b {
            0 => ObjectClass::Vehicle,
            1 => ObjectClass::Pedestrian,
            2 => ObjectClass::Cyclist,
            3 => ObjectClass::Unknown,
            _ => return Err(CodecError::malformed("unknown object class")),
        })
    }
}

/// Angular sensor field of view anchored at `origin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldOfView {
    pub origin_x: f64,
    pub origin_y: f64,
    /// Boresight direction, radians `[0, 2*pi)`.
    pub orientation: f64,
    /// Maximum range, meters.
    pub range: f64,
    /// Half opening angle, radians `(0, pi]`.
    pub half_angle: f64,
}

impl FieldOfView {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.origin_x;
        let dy = y - self.origin_y;
        let dist = dx.hypot(dy);
        if dist > self.range + 1e-9 {
            return false;
        }
        if dist < 1e-9 {
            return true;
        }
        let bearing = dy.atan2(dx);
        wrap_diff(bearing - self.orientation).abs() <= self.half_angle + 1e-9
    }

    fn validate(&self) -> Result<(), CodecError> {
        let finite = self.origin_x.is_finite()
            && self.origin_y.is_finite()
            && self.orientation.is_finite()
            && self.range.is_finite()
            && self.half_angle.is_finite();
        if !finite {
            return Err(CodecError::invariant("field of view has non-finite field"));
        }
        if !(0.0..TAU).contains(&self.orientation) {
            return Err(CodecError::invariant("fov orientation outside [0, 2pi)"));
        }
        if self.range <= 0.0 || self.range > 2.0 * REGION_BOUND {
            return Err(CodecError::invariant("fov range out of bounds"));
        }
        if self.half_angle <= 0.0 || self.half_angle > std::f64::consts::PI {
            return Err(CodecError::invariant("fov half angle outside (0, pi]"));
        }
        Ok(())
    }
}

/// One object as perceived by a sensor, local to the sender's object database.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceivedObject {
    pub object_id: u16,
    pub state: KinematicState,
    pub confidence: f64,
    pub class: ObjectClass,
}

impl PerceivedObject {
    fn validate(&self) -> Result<(), CodecError> {
        self.state.validate()?;
        if !self.confidence.is_finite() || !(0.0..=1.0).contains(&self.confidence) {
            return Err(CodecError::invariant("confidence outside [0, 1]"));
        }
        Ok(())
    }
}

/// Periodic self-report of a station's own state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CamPayload {
    pub sender: StationId,
    pub state: KinematicState,
    pub gen_time_ms: u64,
}

/// Report of objects a station's sensors perceive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpmPayload {
    pub sender: StationId,
    pub sensor_fov: FieldOfView,
    pub objects: Vec<PerceivedObject>,
    pub gen_time_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenmCause {
    MaliciousCpm,
    HackedVehicle,
    HackedTrafficLight,
    VruCollision,
    OnboardCompromise,
    CanIntrusion,
}

impl DenmCause {
    fn to_byte(self) -> u8 {
        match self {
            DenmCause::MaliciousCpm => 0,
            DenmCause::HackedVehicle => 1,
            DenmCause::HackedTrafficLight => 2,
            DenmCause::VruCollision => 3,
            DenmCause::OnboardCompromise => 4,
            DenmCause::CanIntrusion => 5,
        }
    }

    fn from_byte(b: u8) -> Result<Self, CodecError> {
        Ok(match b {
            0 => DenmCause::MaliciousCpm,
            1 => DenmCause::HackedVehicle,
            2 => DenmCause::HackedTrafficLight,
            3 => DenmCause::VruCollision,
            4 => DenmCause::OnboardCompromise,
            5 => DenmCause::CanIntrusion,
            _ => return Err(CodecError::malformed("unknown DENM cause")),
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            DenmCause::MaliciousCpm => "malicious_cpm",
            DenmCause::HackedVehicle => "hacked_vehicle",
            DenmCause::HackedTrafficLight => "hacked_traffic_light",
            DenmCause::VruCollision => "vru_collision",
            DenmCause::OnboardCompromise => "onboard_compromise",
            DenmCause::CanIntrusion => "can_intrusion",
        }
    }
}

/// Event-triggered warning; the misbehavior-report vehicle of this system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenmPayload {
    pub sender: StationId,
    pub cause: DenmCause,
    /// Position of the event the warning refers to.
    pub event_state: KinematicState,
    /// Offending station, 0 when unknown.
    pub offender: StationId,
    /// SHA-256 of the offending signed message, all-zero when none.
    pub evidence_digest: [u8; 32],
    pub gen_time_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseState {
    Red,
    Yellow,
    Green,
    RedYellowBlinking,
}

impl PhaseState {
    fn to_byte(self) -> u8 {
        match self {
            PhaseState::Red => 0,
            PhaseState::Yellow => 1,
            PhaseState::Green => 2,
            PhaseState::RedYellowBlinking => 3,
        }
    }

    fn from_byte(b: u8) -> Result<Self, CodecError> {
        Ok(match b {
            0 => PhaseState::Red,
            1 => PhaseState::Yellow,
            2 => PhaseState::Green,
            3 => PhaseState::RedYellowBlinking,
            _ => return Err(CodecError::malformed("unknown phase state")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatPhase {
    pub signal_group: u8,
    pub state: PhaseState,
    pub time_to_change_ms: u32,
}

/// Signal phase and timing broadcast of the traffic light.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatPayload {
    pub sender: StationId,
    pub phases: Vec<SpatPhase>,
    pub gen_time_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Approach {
    N,
    E,
    S,
    W,
}

impl Approach {
    fn to_byte(self) -> u8 {
        match self {
            Approach::N => 0,
            Approach::E => 1,
            Approach::S => 2,
            Approach::W => 3,
        }
    }

    fn from_byte(b: u8) -> Result<Self, CodecError> {
        Ok(match b {
            0 => Approach::N,
            1 => Approach::E,
            2 => Approach::S,
            3 => Approach::W,
            _ => return Err(CodecError::malformed("unknown approach")),
        })
    }
}

/// One signalized lane connection through the intersection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapLane {
    pub lane_id: u16,
    pub ingress: Approach,
    pub egress: Approach,
    pub signal_group: u8,
}

/// Static lane-topology description of the intersection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPayload {
    pub sender: StationId,
    pub lanes: Vec<MapLane>,
}

/// Any V2X payload this system exchanges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Cam(CamPayload),
    Cpm(CpmPayload),
    Denm(DenmPayload),
    Spat(SpatPayload),
    Map(MapPayload),
}

impl Payload {
    pub fn type_tag(&self) -> u8 {
        match self {
            Payload::Cam(_) => TAG_CAM,
            Payload::Cpm(_) => TAG_CPM,
            Payload::Denm(_) => TAG_DENM,
            Payload::Spat(_) => TAG_SPAT,
            Payload::Map(_) => TAG_MAP,
        }
    }

    pub fn sender(&self) -> StationId {
        match self {
            Payload::Cam(p) => p.sender,
            Payload::Cpm(p) => p.sender,
            Payload::Denm(p) => p.sender,
            Payload::Spat(p) => p.sender,
            Payload::Map(p) => p.sender,
        }
    }

    pub fn kind_label(&self) -> &'static str {
        match self {
            Payload::Cam(_) => "cam",
            Payload::Cpm(_) => "cpm",
            Payload::Denm(_) => "denm",
            Payload::Spat(_) => "spat",
            Payload::Map(_) => "map",
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.sender().is_unknown() {
            return Err(CodecError::invariant("sender 0 is reserved"));
        }
        match self {
            Payload::Cam(p) => p.state.validate(),
            Payload::Cpm(p) => {
                p.sensor_fov.validate()?;
                if p.objects.len() > MAX_CPM_OBJECTS {
                    return Err(CodecError::invariant("CPM object list above 128 entries"));
                }
                for obj in &p.objects {
                    obj.validate()?;
                    if !p.sensor_fov.contains(obj.state.x, obj.state.y) {
                        return Err(CodecError::invariant(
                            "CPM object outside declared sensor field of view",
                        ));
                    }
                }
                Ok(())
            }
            Payload::Denm(p) => p.event_state.validate(),
            Payload::Spat(p) => {
                let mut seen = [false; 256];
                for ph in &p.phases {
                    if seen[ph.signal_group as usize] {
                        return Err(CodecError::invariant("duplicate signal group in SPaT"));
                    }
                    seen[ph.signal_group as usize] = true;
                }
                Ok(())
            }
            Payload::Map(p) => {
                let mut ids: Vec<u16> = p.lanes.iter().map(|l| l.lane_id).collect();
                ids.sort_unstable();
                ids.dedup();
                if ids.len() != p.lanes.len() {
                    return Err(CodecError::invariant("duplicate lane id in MAP"));
                }
                Ok(())
            }
        }
    }
}

/// Codec failure modes.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    /// Truncated input, unknown tag, or trailing bytes.
    #[error("malformed message: {0}")]
    Malformed(String),
    /// Structurally valid bytes describing a payload that breaks its
    /// type invariants.
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

impl CodecError {
    pub(crate) fn malformed(msg: impl Into<String>) -> Self {
        CodecError::Malformed(msg.into())
    }

    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        CodecError::InvariantViolation(msg.into())
    }
}

/// Little-endian fixed-width writer shared with the trust envelope codec.
#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a fixed-width byte string; every read can fail on truncation.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.pos + n > self.buf.len() {
            return Err(CodecError::malformed("truncated message"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        self.take(n)
    }

    pub fn expect_end(&self) -> Result<(), CodecError> {
        if self.pos != self.buf.len() {
            return Err(CodecError::malformed("trailing bytes"));
        }
        Ok(())
    }
}

fn write_state(w: &mut ByteWriter, s: &KinematicState) {
    w.f64(s.x).f64(s.y).f64(s.heading).f64(s.speed).f64(s.accel);
}

fn read_state(r: &mut ByteReader) -> Result<KinematicState, CodecError> {
    Ok(KinematicState {
        x: r.f64()?,
        y: r.f64()?,
        heading: r.f64()?,
        speed: r.f64()?,
        accel: r.f64()?,
    })
}

fn write_fov(w: &mut ByteWriter, f: &FieldOfView) {
    w.f64(f.origin_x).f64(f.origin_y).f64(f.orientation).f64(f.range).f64(f.half_angle);
}

fn read_fov(r: &mut ByteReader) -> Result<FieldOfView, CodecError> {
    Ok(FieldOfView {
        origin_x: r.f64()?,
        origin_y: r.f64()?,
        orientation: r.f64()?,
        range: r.f64()?,
        half_angle: r.f64()?,
    })
}

/// Encodes a payload to its canonical byte string.
///
/// Fails with `InvariantViolation` when the payload breaks its type
/// invariants; the encoding itself cannot fail.
pub fn encode(payload: &Payload) -> Result<Vec<u8>, CodecError> {
    payload.validate()?;
    let mut w = ByteWriter::new();
    w.u8(payload.type_tag());
    match payload {
        Payload::Cam(p) => {
            w.u32(p.sender.0);
            write_state(&mut w, &p.state);
            w.u64(p.gen_time_ms);
        }
        Payload::Cpm(p) => {
            w.u32(p.sender.0);
            write_fov(&mut w, &p.sensor_fov);
            w.u16(p.objects.len() as u16);
            for obj in &p.objects {
                w.u16(obj.object_id);
                write_state(&mut w, &obj.state);
                w.f64(obj.confidence);
                w.u8(obj.class.to_byte());
            }
            w.u64(p.gen_time_ms);
        }
        Payload::Denm(p) => {
            w.u32(p.sender.0);
            w.u8(p.cause.to_byte());
            write_state(&mut w, &p.event_state);
            w.u32(p.offender.0);
            w.bytes(&p.evidence_digest);
            w.u64(p.gen_time_ms);
        }
        Payload::Spat(p) => {
            w.u32(p.sender.0);
            w.u16(p.phases.len() as u16);
            for ph in &p.phases {
                w.u8(ph.signal_group);
                w.u8(ph.state.to_byte());
                w.u32(ph.time_to_change_ms);
            }
            w.u64(p.gen_time_ms);
        }
        Payload::Map(p) => {
            w.u32(p.sender.0);
            w.u16(p.lanes.len() as u16);
            for lane in &p.lanes {
                w.u16(lane.lane_id);
                w.u8(lane.ingress.to_byte());
                w.u8(lane.egress.to_byte());
                w.u8(lane.signal_group);
            }
        }
    }
    Ok(w.finish())
}

/// Decodes a canonical byte string back into a typed payload.
///
/// The inverse of [`encode`] on its image. Truncation, unknown tags and
/// trailing bytes yield `Malformed`; decoded fields that break type
/// invariants yield `InvariantViolation`.
pub fn decode(bytes: &[u8]) -> Result<Payload, CodecError> {
    let mut r = ByteReader::new(bytes);
    let tag = r.u8()?;
    let payload = match tag {
        TAG_CAM => {
            let sender = StationId(r.u32()?);
            let state = read_state(&mut r)?;
            let gen_time_ms = r.u64()?;
            Payload::Cam(CamPayload { sender, state, gen_time_ms })
        }
        TAG_CPM => {
            let sender = StationId(r.u32()?);
            let sensor_fov = read_fov(&mut r)?;
            let n = r.u16()? as usize;
            let mut objects = Vec::with_capacity(n.min(MAX_CPM_OBJECTS + 1));
            for _ in 0..n {
                let object_id = r.u16()?;
                let state = read_state(&mut r)?;
                let confidence = r.f64()?;
                let class = ObjectClass::from_byte(r.u8()?)?;
                objects.push(PerceivedObject { object_id, state, confidence, class });
            }
            let gen_time_ms = r.u64()?;
            Payload::Cpm(CpmPayload { sender, sensor_fov, objects, gen_time_ms })
        }
        TAG_DENM => {
            let sender = StationId(r.u32()?);
            let cause = DenmCause::from_byte(r.u8()?)?;
            let event_state = read_state(&mut r)?;
            let offender = StationId(r.u32()?);
            let evidence_digest: [u8; 32] = r.bytes(32)?.try_into().unwrap();
            let gen_time_ms = r.u64()?;
            Payload::Denm(DenmPayload {
                sender,
                cause,
                event_state,
                offender,
                evidence_digest,
                gen_time_ms,
            })
        }
        TAG_SPAT => {
            let sender = StationId(r.u32()?);
            let n = r.u16()? as usize;
            let mut phases = Vec::with_capacity(n.min(256));
            for _ in 0..n {
                let signal_group = r.u8()?;
                let state = PhaseState::from_byte(r.u8()?)?;
                let time_to_change_ms = r.u32()?;
                phases.push(SpatPhase { signal_group, state, time_to_change_ms });
            }
            let gen_time_ms = r.u64()?;
            Payload::Spat(SpatPayload { sender, phases, gen_time_ms })
        }
        TAG_MAP => {
            let sender = StationId(r.u32()?);
            let n = r.u16()? as usize;
            let mut lanes = Vec::with_capacity(n.min(1024));
            for _ in 0..n {
                let lane_id = r.u16()?;
                let ingress = Approach::from_byte(r.u8()?)?;
                let egress = Approach::from_byte(r.u8()?)?;
                let signal_group = r.u8()?;
                lanes.push(MapLane { lane_id, ingress, egress, signal_group });
            }
            Payload::Map(MapPayload { sender, lanes })
        }
        other => return Err(CodecError::malformed(format!("unknown type tag {other:#04x}"))),
    };
    r.expect_end()?;
    payload.validate()?;
    Ok(payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Independent byte-count oracle: sums declared field widths without
    /// touching the encoder.
    fn expected_len(p: &Payload) -> usize {
        const STATE: usize = 5 * 8;
        const FOV: usize = 5 * 8;
        match p {
            Payload::Cam(_) => 1 + 4 + STATE + 8,
            Payload::Cpm(c) => 1 + 4 + FOV + 2 + c.objects.len() * (2 + STATE + 8 + 1) + 8,
            Payload::Denm(_) => 1 + 4 + 1 + STATE + 4 + 32 + 8,
            Payload::Spat(s) => 1 + 4 + 2 + s.phases.len() * (1 + 1 + 4) + 8,
            Payload::Map(m) => 1 + 4 + 2 + m.lanes.len() * (2 + 1 + 1 + 1),
        }
    }

    fn sample_state(rng: &mut ChaCha8Rng) -> KinematicState {
        KinematicState {
            x: rng.random_range(-400.0..400.0),
            y: rng.random_range(-400.0..400.0),
            heading: rng.random_range(0.0..TAU - 1e-9),
            speed: rng.random_range(0.0..90.0),
            accel: rng.random_range(-15.0..15.0),
        }
    }

    fn wide_fov() -> FieldOfView {
        FieldOfView {
            origin_x: 0.0,
            origin_y: 0.0,
            orientation: 0.0,
            range: 900.0,
            half_angle: std::f64::consts::PI,
        }
    }

    pub(crate) fn sample_payload(rng: &mut ChaCha8Rng) -> Payload {
        let sender = StationId(rng.random_range(1..=u32::MAX));
        match rng.random_range(0..5) {
            0 => Payload::Cam(CamPayload {
                sender,
                state: sample_state(rng),
                gen_time_ms: rng.random_range(0..1_000_000),
            }),
            1 => {
                let n = rng.random_range(0..6);
                let objects = (0..n)
                    .map(|i| PerceivedObject {
                        object_id: i,
                        state: sample_state(rng),
                        confidence: rng.random_range(0.0..=1.0),
                        class: *[
                            ObjectClass::Vehicle,
                            ObjectClass::Pedestrian,
                            ObjectClass::Cyclist,
                            ObjectClass::Unknown,
                        ]
                        .choose(rng)
                        .unwrap(),
                    })
                    .collect();
                Payload::Cpm(CpmPayload {
                    sender,
                    sensor_fov: wide_fov(),
                    objects,
                    gen_time_ms: rng.random_range(0..1_000_000),
                })
            }
            2 => Payload::Denm(DenmPayload {
                sender,
                cause: DenmCause::from_byte(rng.random_range(0..6)).unwrap(),
                event_state: sample_state(rng),
                offender: StationId(rng.random_range(0..100)),
                evidence_digest: rng.random(),
                gen_time_ms: rng.random_range(0..1_000_000),
            }),
            3 => {
                let n = rng.random_range(0..9u8);
                let phases = (0..n)
                    .map(|g| SpatPhase {
                        signal_group: g,
                        state: PhaseState::from_byte(rng.random_range(0..4)).unwrap(),
                        time_to_change_ms: rng.random_range(0..60_000),
                    })
                    .collect();
                Payload::Spat(SpatPayload {
                    sender,
                    phases,
                    gen_time_ms: rng.random_range(0..1_000_000),
                })
            }
            _ => {
                let n = rng.random_range(1..9u16);
                let lanes = (0..n)
                    .map(|i| MapLane {
                        lane_id: i,
                        ingress: Approach::from_byte(rng.random_range(0..4)).unwrap(),
                        egress: Approach::from_byte(rng.random_range(0..4)).unwrap(),
                        signal_group: rng.random_range(0..8),
                    })
                    .collect();
                Payload::Map(MapPayload { sender, lanes })
            }
        }
    }

    fn origin_cam() -> Payload {
        Payload::Cam(CamPayload {
            sender: StationId(1),
            state: KinematicState::new(0.0, 0.0, 0.0, 0.0, 0.0),
            gen_time_ms: 0,
        })
    }

    #[test]
    fn cam_length_matches_byte_count_oracle() {
        let p = origin_cam();
        let bytes = encode(&p).unwrap();
        // Oracle: 1 (tag) + 4 (sender) + 40 (state) + 8 (genTime) = 53.
        assert_eq!(expected_len(&p), 53);
        assert_eq!(bytes.len(), expected_len(&p));
        assert_eq!(bytes[0], TAG_CAM);
    }

    #[test]
    fn all_types_match_byte_count_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let p = sample_payload(&mut rng);
            assert_eq!(encode(&p).unwrap().len(), expected_len(&p));
        }
    }

    #[test]
    fn round_trip_random_payloads() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let p = sample_payload(&mut rng);
            let bytes = encode(&p).unwrap();
            assert_eq!(decode(&bytes).unwrap(), p);
        }
    }

    #[test]
    fn gen_time_locality() {
        let a = Payload::Cam(CamPayload {
            sender: StationId(9),
            state: KinematicState::new(1.0, 2.0, 0.5, 3.0, 0.1),
            gen_time_ms: 1000,
        });
        let b = Payload::Cam(CamPayload {
            sender: StationId(9),
            state: KinematicState::new(1.0, 2.0, 0.5, 3.0, 0.1),
            gen_time_ms: 2000,
        });
        let ba = encode(&a).unwrap();
        let bb = encode(&b).unwrap();
        assert_eq!(ba.len(), bb.len());
        let gen_off = ba.len() - 8;
        assert_eq!(ba[..gen_off], bb[..gen_off]);
        assert_ne!(ba[gen_off..], bb[gen_off..]);
    }

    #[test]
    fn empty_input_is_malformed() {
        assert!(matches!(decode(&[]), Err(CodecError::Malformed(_))));
    }

    #[test]
    fn truncations_and_trailing_bytes_rejected() {
        let bytes = encode(&origin_cam()).unwrap();
        for cut in 0..bytes.len() {
            assert!(
                matches!(decode(&bytes[..cut]), Err(CodecError::Malformed(_))),
                "truncation at {cut} must be malformed"
            );
        }
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(matches!(decode(&extended), Err(CodecError::Malformed(_))));
    }

    #[test]
    fn patched_speed_field_violates_invariant() {
        let mut bytes = encode(&origin_cam()).unwrap();
        // Layout oracle: tag 1 + sender 4 + x 8 + y 8 + heading 8 = 29 bytes
        // before the speed field.
        let speed_off = 1 + 4 + 8 + 8 + 8;
        bytes[speed_off..speed_off + 8].copy_from_slice(&200.0f64.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(CodecError::InvariantViolation(_))));
    }

    #[test]
    fn invalid_payload_refuses_to_encode() {
        let p = Payload::Cam(CamPayload {
            sender: StationId(1),
            state: KinematicState::new(0.0, 0.0, 0.0, 120.0, 0.0),
            gen_time_ms: 0,
        });
        assert!(matches!(encode(&p), Err(CodecError::InvariantViolation(_))));
        let unknown_sender = Payload::Cam(CamPayload {
            sender: StationId::UNKNOWN,
            state: KinematicState::new(0.0, 0.0, 0.0, 0.0, 0.0),
            gen_time_ms: 0,
        });
        assert!(matches!(encode(&unknown_sender), Err(CodecError::InvariantViolation(_))));
    }

    #[test]
    fn cpm_object_outside_fov_rejected() {
        let fov = FieldOfView {
            origin_x: 0.0,
            origin_y: 0.0,
            orientation: 0.0,
            range: 50.0,
            half_angle: 1.0,
        };
        let p = Payload::Cpm(CpmPayload {
            sender: StationId(2),
            sensor_fov: fov,
            objects: vec![PerceivedObject {
                object_id: 1,
                state: KinematicState::new(60.0, 0.0, 0.0, 0.0, 0.0),
                confidence: 1.0,
                class: ObjectClass::Vehicle,
            }],
            gen_time_ms: 0,
        });
        assert!(matches!(encode(&p), Err(CodecError::InvariantViolation(_))));
    }

    #[test]
    fn injectivity_spot_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..2000 {
            let p = sample_payload(&mut rng);
            let bytes = encode(&p).unwrap();
            if !seen.insert(bytes.clone()) {
                // Identical bytes must mean identical payloads.
                assert_eq!(decode(&bytes).unwrap(), p);
            }
        }
    }

    #[test]
    fn fov_containment_wraps_across_zero() {
        let fov = FieldOfView {
            origin_x: 0.0,
            origin_y: 0.0,
            orientation: 0.1,
            range: 100.0,
            half_angle: 0.5,
        };
        assert!(fov.contains(50.0, -10.0)); // bearing ~ -0.197
        assert!(!fov.contains(0.0, 50.0)); // bearing ~ +1.57
    }
}

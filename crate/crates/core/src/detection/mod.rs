//! The misbehavior-detection pipeline.
//!
//! Layered detectors, each producing [`DetectionReport`]s:
//! - message-level security, plausibility and stream-consistency checks,
//! - cross-checks between received object claims and local sensing
//!   (position usurpation, ghost, hijacked vehicle),
//! - a constant-velocity Kalman filter with normalized-innovation gating on
//!   pedestrian object data,
//! - SPaT conflicting-movement checks against the lane-topology conflict
//!   matrix,
//! - deviation between a station's self-reports and roadside perception,
//! - closest-point-of-approach collision prediction for pedestrians,
//! - CAN inter-arrival timing detection.
//!
//! Detectors are stateful by value and order-insensitive within a step: the
//! set of reports emitted in a step never depends on the processing order of
//! that step's messages.

pub mod can;
pub mod checks;
pub mod collision;
pub mod cross_check;
pub mod deviation;
pub mod ekf;
pub mod spat;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::messages::StationId;

/// Which detection module produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Security,
    Plausibility,
    Consistency,
    CrossCheck,
    EkfGate,
    SpatConflict,
    CamPerceptionDeviation,
    VruCollision,
    CanTiming,
}

impl Detector {
    pub fn label(&self) -> &'static str {
        match self {
            Detector::Security => "security",
            Detector::Plausibility => "plausibility",
            Detector::Consistency => "consistency",
            Detector::CrossCheck => "cross_check",
            Detector::EkfGate => "ekf_gate",
            Detector::SpatConflict => "spat_conflict",
            Detector::CamPerceptionDeviation => "cam_perception_deviation",
            Detector::VruCollision => "vru_collision",
            Detector::CanTiming => "can_timing",
        }
    }
}

/// Anomaly classes reports can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anomaly {
    BadSignature,
    ImplausiblePayload,
    InconsistentStream,
    PositionUsurpation,
    Ghost,
    HijackedVehicle,
    ConflictingGreens,
    StopLie,
    ImminentCollision,
    CanDos,
    CanInjection,
}

impl Anomaly {
    pub fn label(&self) -> &'static str {
        match self {
            Anomaly::BadSignature => "bad_signature",
            Anomaly::ImplausiblePayload => "implausible_payload",
            Anomaly::InconsistentStream => "inconsistent_stream",
            Anomaly::PositionUsurpation => "position_usurpation",
            Anomaly::Ghost => "ghost",
            Anomaly::HijackedVehicle => "hijacked_vehicle",
            Anomaly::ConflictingGreens => "conflicting_greens",
            Anomaly::StopLie => "stop_lie",
            Anomaly::ImminentCollision => "imminent_collision",
            Anomaly::CanDos => "can_dos",
            Anomaly::CanInjection => "can_injection",
        }
    }

    pub fn all() -> &'static [Anomaly] {
        &[
            Anomaly::BadSignature,
            Anomaly::ImplausiblePayload,
            Anomaly::InconsistentStream,
            Anomaly::PositionUsurpation,
            Anomaly::Ghost,
            Anomaly::HijackedVehicle,
            Anomaly::ConflictingGreens,
            Anomaly::StopLie,
            Anomaly::ImminentCollision,
            Anomaly::CanDos,
            Anomaly::CanInjection,
        ]
    }
}

/// Who a report blames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Offender {
    Station(StationId),
    CanId(u16),
    Unknown,
}

impl Offender {
    pub fn station(&self) -> StationId {
        match self {
            Offender::Station(s) => *s,
            _ => StationId::UNKNOWN,
        }
    }
}

/// Where a measurement stream came from, for per-source innovation gating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementSource {
    Cam,
    Cpm,
    Onboard,
    Uwb,
}

impl MeasurementSource {
    pub fn label(&self) -> &'static str {
        match self {
            MeasurementSource::Cam => "cam",
            MeasurementSource::Cpm => "cpm",
            MeasurementSource::Onboard => "onboard",
            MeasurementSource::Uwb => "uwb",
        }
    }
}

/// Identity of a track cited as collision evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackRef {
    Station(StationId),
    CpmObject { sender: StationId, object_id: u16 },
    UwbTag(u32),
    LocalObject(u16),
}

/// The unit consumed by the security-notification routing: one detected
/// anomaly with offender and evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub detector: Detector,
    pub anomaly: Anomaly,
    pub offender: Offender,
    /// Digests of the implicated signed messages. Empty only for collision
    /// predictions, which cite two tracks instead.
    pub evidence: Vec<[u8; 32]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tracks: Option<(TrackRef, TrackRef)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<MeasurementSource>,
    /// Predicted time to collision, present on imminent-collision reports.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ttc_ms: Option<u64>,
    pub sim_time_ms: u64,
}

impl DetectionReport {
    pub fn is_well_formed(&self) -> bool {
        if self.anomaly == Anomaly::ImminentCollision {
            self.tracks.is_some()
        } else {
            !self.evidence.is_empty()
        }
    }
}

/// Innovation-gate configuration. The default threshold is the 0.99 quantile
/// of the chi-squared distribution with 2 degrees of freedom, computed rather
/// than hardcoded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub nis_threshold: f64,
    /// Consecutive exceedances required before a report.
    pub window_k: u32,
    /// White-noise-acceleration process noise density, m^2/s^3.
    pub process_noise_q: f64,
    /// Updates ignored by the gate while a fresh track settles.
    pub warmup_updates: u32,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            nis_threshold: chi2_quantile(0.99, 2.0),
            window_k: 3,
            process_noise_q: 0.5,
            warmup_updates: 5,
        }
    }
}

/// Quantile of the chi-squared distribution with `dof` degrees of freedom.
pub fn chi2_quantile(p: f64, dof: f64) -> f64 {
    ChiSquared::new(dof).expect("valid dof").inverse_cdf(p)
}

/// Thresholds shared by the message-level and cross-check detectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub gate: GateConfig,
    /// Association gate for matching remote claims to local objects, meters.
    pub r_assoc: f64,
    /// Two identities closer than this claim the same spot, meters.
    pub r_dup: f64,
    /// Consecutive steps a cross-check condition must hold.
    pub window_k: u32,
    /// Plausibility bound on reported speed, m/s.
    pub max_plausible_speed: f64,
    /// Plausibility bound on reported |accel|, m/s^2.
    pub max_plausible_accel: f64,
    /// Samples spanned by windowed speed estimates.
    pub speed_window: usize,
    /// Assumed position noise of CPM-carried object data, meters; sets the
    /// measurement covariance for remote filter updates.
    pub cpm_sigma: f64,
    /// Collision-prediction horizon, seconds.
    pub collision_horizon_s: f64,
    /// Collision miss-distance threshold, meters.
    pub collision_dmin: f64,
    /// Threat tracks slower than this are not extrapolated, m/s.
    pub collision_min_threat_speed: f64,
    /// Pedestrian tracks slower than this are treated as not crossing, m/s.
    pub collision_min_vru_speed: f64,
    /// Consecutive collision predictions required before warning.
    pub collision_window_k: u32,
    /// Re-arm interval for repeated identical reports, ms.
    pub report_holdoff_ms: u64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            gate: GateConfig::default(),
            r_assoc: 2.0,
            r_dup: 1.5,
            window_k: 3,
            max_plausible_speed: 70.0,
            max_plausible_accel: 10.0,
            speed_window: 8,
            cpm_sigma: 0.5,
            collision_horizon_s: 4.0,
            collision_dmin: 2.0,
            collision_min_threat_speed: 1.0,
            collision_min_vru_speed: 0.5,
            collision_window_k: 2,
            report_holdoff_ms: 3000,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_99_quantile_2dof_matches_closed_form() {
        // For 2 dof the chi-squared distribution is Exp(1/2), so the
        // p-quantile is -2 ln(1 - p).
        let q = chi2_quantile(0.99, 2.0);
        assert!((q - (-2.0 * (0.01f64).ln())).abs() < 1e-9);
        assert!((q - 9.210340).abs() < 1e-5);
    }

    #[test]
    fn default_gate_uses_computed_threshold() {
        let g = GateConfig::default();
        assert!((g.nis_threshold - chi2_quantile(0.99, 2.0)).abs() < 1e-12);
        assert_eq!(g.window_k, 3);
    }

    #[test]
    fn report_well_formedness() {
        let mut r = DetectionReport {
            detector: Detector::Security,
            anomaly: Anomaly::BadSignature,
            offender: Offender::Unknown,
            evidence: vec![],
            tracks: None,
            source: None,
            ttc_ms: None,
            sim_time_ms: 0,
        };
        assert!(!r.is_well_formed());
        r.evidence.push([0u8; 32]);
        assert!(r.is_well_formed());

        let collision = DetectionReport {
            detector: Detector::VruCollision,
            anomaly: Anomaly::ImminentCollision,
            offender: Offender::Station(StationId(5)),
            evidence: vec![],
            tracks: Some((TrackRef::UwbTag(1), TrackRef::Station(StationId(5)))),
            source: None,
            ttc_ms: Some(2000),
            sim_time_ms: 0,
        };
        assert!(collision.is_well_formed());
    }
}

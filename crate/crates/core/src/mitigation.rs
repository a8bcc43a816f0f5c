//! Security-notification routing: maps detection reports to mitigation
//! actions (DENM warning broadcast, traffic-light override request, HMI
//! notification, own-key purge) and bounds error propagation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{Anomaly, DetectionReport, Detector, MeasurementSource};
use crate::messages::DenmCause;

/// Physical light state an override requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverrideTarget {
    RedYellowBlinking,
    AllRed,
}

/// One mitigation primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MitigationKind {
    BroadcastDenm,
    RequestLightOverride(OverrideTarget),
    HmiNotify,
    PurgeOwnKeys,
}

impl MitigationKind {
    pub fn label(&self) -> &'static str {
        match self {
            MitigationKind::BroadcastDenm => "broadcast_denm",
            MitigationKind::RequestLightOverride(OverrideTarget::RedYellowBlinking) => {
                "request_light_override_red_yellow_blinking"
            }
            MitigationKind::RequestLightOverride(OverrideTarget::AllRed) => {
                "request_light_override_all_red"
            }
            MitigationKind::HmiNotify => "hmi_notify",
            MitigationKind::PurgeOwnKeys => "purge_own_keys",
        }
    }
}

/// Outcome of executing one action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionOutcome {
    Delivered,
    Ignored,
    Pending,
}

impl ActionOutcome {
    pub fn label(&self) -> &'static str {
        match self {
            ActionOutcome::Delivered => "delivered",
            ActionOutcome::Ignored => "ignored",
            ActionOutcome::Pending => "pending",
        }
    }
}

/// Role of the agent doing the routing; actions are filtered by what the
/// role can physically execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentContext {
    Vehicle,
    Rsu,
    Vru,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    /// The policy table has no entry for an anomaly; configuration error.
    #[error("policy does not map anomaly {0:?}")]
    UnmappedAnomaly(Anomaly),
}

/// One policy table row. A `None` detector matches any detector reporting
/// that anomaly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<Detector>,
    pub anomaly: Anomaly,
    pub actions: Vec<MitigationKind>,
}

/// Ordered mitigation table mapping (detector, anomaly) to action lists.
/// First matching rule wins; specific-detector rules should precede
/// wildcards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationPolicy {
    pub rules: Vec<PolicyRule>,
}

impl Default for MitigationPolicy {
    fn default() -> Self {
        use Anomaly::*;
        use MitigationKind::*;
        use OverrideTarget::*;
        let rule = |detector: Option<Detector>, anomaly, actions: &[MitigationKind]| PolicyRule {
            detector,
            anomaly,
            actions: actions.to_vec(),
        };
        MitigationPolicy {
            rules: vec![
                rule(None, BadSignature, &[HmiNotify]),
                rule(None, ImplausiblePayload, &[BroadcastDenm]),
                // Model-driven gate hits are warned over V2X.
                rule(Some(Detector::EkfGate), InconsistentStream, &[BroadcastDenm]),
                rule(None, InconsistentStream, &[BroadcastDenm]),
                rule(
                    None,
                    PositionUsurpation,
                    &[BroadcastDenm, RequestLightOverride(RedYellowBlinking)],
                ),
                rule(None, Ghost, &[BroadcastDenm, RequestLightOverride(RedYellowBlinking)]),
                rule(
                    None,
                    HijackedVehicle,
                    &[BroadcastDenm, RequestLightOverride(RedYellowBlinking)],
                ),
                rule(
                    None,
                    ConflictingGreens,
                    &[BroadcastDenm, RequestLightOverride(RedYellowBlinking)],
                ),
                rule(None, StopLie, &[BroadcastDenm, RequestLightOverride(RedYellowBlinking)]),
                rule(None, ImminentCollision, &[HmiNotify, RequestLightOverride(AllRed)]),
                // Key purge strictly after the warning so it can still be
                // signed.
                rule(None, CanDos, &[BroadcastDenm, PurgeOwnKeys]),
                rule(None, CanInjection, &[BroadcastDenm, PurgeOwnKeys]),
            ],
        }
    }
}

impl MitigationPolicy {
    /// Every anomaly must map to at least one action.
    pub fn validate_total(&self) -> Result<(), PolicyError> {
        for &anomaly in Anomaly::all() {
            let covered = self
                .rules
                .iter()
                .any(|r| r.anomaly == anomaly && !r.actions.is_empty());
            if !covered {
                return Err(PolicyError::UnmappedAnomaly(anomaly));
            }
        }
        Ok(())
    }

    fn lookup(&self, detector: Detector, anomaly: Anomaly) -> Result<&[MitigationKind], PolicyError> {
        self.rules
            .iter()
            .find(|r| r.anomaly == anomaly && (r.detector.is_none() || r.detector == Some(detector)))
            .map(|r| r.actions.as_slice())
            .ok_or(PolicyError::UnmappedAnomaly(anomaly))
    }
}

fn executable_in(kind: MitigationKind, ctx: AgentContext) -> bool {
    match kind {
        MitigationKind::BroadcastDenm => matches!(ctx, AgentContext::Vehicle | AgentContext::Rsu),
        MitigationKind::RequestLightOverride(_) => ctx == AgentContext::Rsu,
        MitigationKind::HmiNotify => true,
        MitigationKind::PurgeOwnKeys => ctx == AgentContext::Vehicle,
    }
}

/// Resolves the actions an agent in `context` must execute for a report, in
/// execution order. Actions the role cannot physically perform (a handheld
/// has no light-control link or signing keys) are filtered out.
pub fn route(
    report: &DetectionReport,
    policy: &MitigationPolicy,
    context: AgentContext,
) -> Result<Vec<MitigationKind>, PolicyError> {
    let actions = policy.lookup(report.detector, report.anomaly)?;
    Ok(actions.iter().copied().filter(|&k| executable_in(k, context)).collect())
}

/// DENM cause corresponding to a detection report, for warning emission.
pub fn denm_cause_for(report: &DetectionReport) -> DenmCause {
    match report.anomaly {
        Anomaly::PositionUsurpation | Anomaly::Ghost | Anomaly::HijackedVehicle => {
            DenmCause::MaliciousCpm
        }
        Anomaly::ConflictingGreens => DenmCause::HackedTrafficLight,
        Anomaly::StopLie => DenmCause::HackedVehicle,
        Anomaly::ImminentCollision => DenmCause::VruCollision,
        Anomaly::CanDos | Anomaly::CanInjection => DenmCause::CanIntrusion,
        Anomaly::InconsistentStream => match (report.detector, report.source) {
            (Detector::EkfGate, Some(MeasurementSource::Cpm)) => DenmCause::MaliciousCpm,
            (Detector::EkfGate, _) => DenmCause::MaliciousCpm,
            (Detector::SpatConflict, _) => DenmCause::HackedTrafficLight,
            _ => DenmCause::HackedVehicle,
        },
        Anomaly::BadSignature | Anomaly::ImplausiblePayload => match report.detector {
            Detector::SpatConflict => DenmCause::HackedTrafficLight,
            _ => DenmCause::HackedVehicle,
        },
    }
}

/// Warning DENMs are re-broadcast on this cadence while they remain fresh.
pub const DENM_REPEAT_EVERY_STEPS: u64 = 5;
pub const DENM_REPEAT_DURATION_MS: u64 = 3000;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::Offender;
    use crate::messages::StationId;

    fn report(detector: Detector, anomaly: Anomaly) -> DetectionReport {
        DetectionReport {
            detector,
            anomaly,
            offender: Offender::Station(StationId(9)),
            evidence: vec![[1; 32]],
            tracks: None,
            source: None,
            ttc_ms: None,
            sim_time_ms: 0,
        }
    }

    #[test]
    fn default_policy_is_total() {
        MitigationPolicy::default().validate_total().unwrap();
    }

    #[test]
    fn missing_anomaly_fails_validation() {
        let mut policy = MitigationPolicy::default();
        policy.rules.retain(|r| r.anomaly != Anomaly::Ghost);
        assert_eq!(
            policy.validate_total(),
            Err(PolicyError::UnmappedAnomaly(Anomaly::Ghost))
        );
    }

    #[test]
    fn ekf_gate_hit_in_vehicle_broadcasts_denm() {
        let policy = MitigationPolicy::default();
        let r = report(Detector::EkfGate, Anomaly::InconsistentStream);
        let actions = route(&r, &policy, AgentContext::Vehicle).unwrap();
        assert_eq!(actions, vec![MitigationKind::BroadcastDenm]);
    }

    #[test]
    fn conflicting_greens_at_rsu_warns_and_overrides() {
        let policy = MitigationPolicy::default();
        let r = report(Detector::SpatConflict, Anomaly::ConflictingGreens);
        let actions = route(&r, &policy, AgentContext::Rsu).unwrap();
        assert_eq!(
            actions,
            vec![
                MitigationKind::BroadcastDenm,
                MitigationKind::RequestLightOverride(OverrideTarget::RedYellowBlinking)
            ]
        );
    }

    #[test]
    fn collision_warning_notifies_and_requests_red() {
        let policy = MitigationPolicy::default();
        let r = report(Detector::VruCollision, Anomaly::ImminentCollision);
        let actions = route(&r, &policy, AgentContext::Rsu).unwrap();
        assert_eq!(
            actions,
            vec![
                MitigationKind::HmiNotify,
                MitigationKind::RequestLightOverride(OverrideTarget::AllRed)
            ]
        );
        // A handheld can only warn its wearer.
        let vru_actions = route(&r, &policy, AgentContext::Vru).unwrap();
        assert_eq!(vru_actions, vec![MitigationKind::HmiNotify]);
    }

    #[test]
    fn can_intrusion_warns_then_purges_in_order() {
        let policy = MitigationPolicy::default();
        let r = report(Detector::CanTiming, Anomaly::CanDos);
        let actions = route(&r, &policy, AgentContext::Vehicle).unwrap();
        assert_eq!(actions, vec![MitigationKind::BroadcastDenm, MitigationKind::PurgeOwnKeys]);
        // The purge must come strictly after the DENM broadcast.
        assert!(
            actions.iter().position(|a| *a == MitigationKind::PurgeOwnKeys)
                > actions.iter().position(|a| *a == MitigationKind::BroadcastDenm)
        );
    }

    #[test]
    fn vehicles_cannot_override_lights() {
        let policy = MitigationPolicy::default();
        let r = report(Detector::CrossCheck, Anomaly::Ghost);
        let actions = route(&r, &policy, AgentContext::Vehicle).unwrap();
        assert_eq!(actions, vec![MitigationKind::BroadcastDenm]);
    }

    #[test]
    fn denm_causes_match_anomalies() {
        assert_eq!(
            denm_cause_for(&report(Detector::CrossCheck, Anomaly::Ghost)),
            DenmCause::MaliciousCpm
        );
        assert_eq!(
            denm_cause_for(&report(Detector::SpatConflict, Anomaly::ConflictingGreens)),
            DenmCause::HackedTrafficLight
        );
        assert_eq!(
            denm_cause_for(&report(Detector::CamPerceptionDeviation, Anomaly::StopLie)),
            DenmCause::HackedVehicle
        );
        assert_eq!(
            denm_cause_for(&report(Detector::CanTiming, Anomaly::CanInjection)),
            DenmCause::CanIntrusion
        );
        assert_eq!(
            denm_cause_for(&report(Detector::VruCollision, Anomaly::ImminentCollision)),
            DenmCause::VruCollision
        );
    }
}

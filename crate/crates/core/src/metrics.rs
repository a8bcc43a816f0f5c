//! Run metrics: per-attack detection latency, false positives before onset,
//! mitigation outcomes, and the collision flag. The desk-scale key
//! performance indicators of a run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detection::Detector;
use crate::messages::DenmCause;
use crate::mitigation::MitigationKind;
use crate::world::fixture::{AttackPlan, OnboardAttackMode, Scenario, ScenarioKind, STEP_MS};
use crate::world::trace::{Trace, TraceEvent};

pub const METRICS_SCHEMA: &str = "v2x-sentinel-metrics/1";

/// Actor-pair distances below this count as a collision, meters.
pub const COLLISION_DISTANCE_M: f64 = 1.0;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct OutcomeCounts {
    pub delivered: u64,
    pub ignored: u64,
    pub pending: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema: String,
    pub fixture: String,
    pub scenario: String,
    pub seed: u64,
    pub duration_steps: u64,
    pub onset_step: Option<u64>,
    /// First-report latency per designated detector, steps after onset.
    /// `None` means the detector never fired.
    pub detection_latency_steps: BTreeMap<String, Option<u64>>,
    /// Latency to the first report from any designated detector.
    pub designated_first_latency: Option<u64>,
    /// First report step of every detector that fired at all.
    pub first_detection_step: BTreeMap<String, u64>,
    /// Reports in clean runs, or before onset in attack runs.
    pub false_positive_count: u64,
    pub report_count: u64,
    pub mitigation_outcomes: BTreeMap<String, OutcomeCounts>,
    pub collision_occurred: bool,
    pub min_pair_distance: f64,
    pub runtime_ms: u64,
}

/// The detectors expected to catch each scenario.
pub fn designated_detectors(scenario: &Scenario) -> Vec<Detector> {
    match scenario.kind {
        ScenarioKind::Clean => vec![],
        ScenarioKind::S1 => vec![Detector::EkfGate, Detector::CrossCheck],
        ScenarioKind::S2 => vec![Detector::CamPerceptionDeviation, Detector::CrossCheck],
        ScenarioKind::S3 => vec![Detector::SpatConflict],
        ScenarioKind::S4 => vec![Detector::VruCollision, Detector::CamPerceptionDeviation],
        ScenarioKind::S5 => match &scenario.attack {
            Some(AttackPlan::Onboard { mode: OnboardAttackMode::Compromise, .. }) | None => vec![],
            Some(_) => vec![Detector::CanTiming],
        },
    }
}

/// Derives metrics from a finished run's trace.
pub fn compute_metrics(
    scenario: &Scenario,
    trace: &Trace,
    min_pair_distance: f64,
    runtime_ms: u64,
) -> RunMetrics {
    let onset_step = scenario.onset_step();
    let designated = designated_detectors(scenario);

    let mut first_by_detector: BTreeMap<Detector, u64> = BTreeMap::new();
    let mut report_count = 0u64;
    let mut false_positive_count = 0u64;
    let mut mitigation_outcomes: BTreeMap<String, OutcomeCounts> = BTreeMap::new();
    let mut onboard_denm_step: Option<u64> = None;

    for event in &trace.events {
        match event {
            TraceEvent::Detection { step, report, .. } => {
                report_count += 1;
                first_by_detector.entry(report.detector).or_insert(*step);
                match onset_step {
                    Some(onset) if *step >= onset => {}
                    _ => false_positive_count += 1,
                }
            }
            TraceEvent::Mitigation { step, action, outcome, detail, .. } => {
                let counts = mitigation_outcomes.entry(action.label().to_string()).or_default();
                match outcome {
                    crate::mitigation::ActionOutcome::Delivered => counts.delivered += 1,
                    crate::mitigation::ActionOutcome::Ignored => counts.ignored += 1,
                    crate::mitigation::ActionOutcome::Pending => counts.pending += 1,
                }
                if *action == MitigationKind::BroadcastDenm
                    && detail.as_deref() == Some(DenmCause::OnboardCompromise.label())
                    && onboard_denm_step.is_none()
                {
                    onboard_denm_step = Some(*step);
                }
            }
            _ => {}
        }
    }

    let latency_of = |step: u64| -> Option<u64> {
        onset_step.map(|onset| step.saturating_sub(onset))
    };

    let mut detection_latency_steps: BTreeMap<String, Option<u64>> = BTreeMap::new();
    let mut designated_first: Option<u64> = None;
    for d in &designated {
        let latency = first_by_detector.get(d).copied().and_then(latency_of);
        if let Some(l) = latency {
            designated_first = Some(designated_first.map_or(l, |cur: u64| cur.min(l)));
        }
        detection_latency_steps.insert(d.label().to_string(), latency);
    }
    // The onboard-compromise path is detected by the injected signal itself;
    // its response latency is the warn-then-purge DENM.
    if let Some(AttackPlan::Onboard { mode: OnboardAttackMode::Compromise, .. }) = &scenario.attack
    {
        let latency = onboard_denm_step.and_then(latency_of);
        detection_latency_steps.insert("onboard_compromise".to_string(), latency);
        if let Some(l) = latency {
            designated_first = Some(designated_first.map_or(l, |cur: u64| cur.min(l)));
        }
    }

    RunMetrics {
        schema: METRICS_SCHEMA.to_string(),
        fixture: scenario.name.clone(),
        scenario: scenario.kind.label().to_string(),
        seed: scenario.seed,
        duration_steps: scenario.duration_ms / STEP_MS,
        onset_step,
        detection_latency_steps,
        designated_first_latency: designated_first,
        first_detection_step: first_by_detector
            .into_iter()
            .map(|(d, s)| (d.label().to_string(), s))
            .collect(),
        false_positive_count,
        report_count,
        mitigation_outcomes,
        collision_occurred: min_pair_distance < COLLISION_DISTANCE_M,
        min_pair_distance,
        runtime_ms,
    }
}

//! Validity checks on SPaT broadcasts: conflicting movement allowances
//! against the lane-topology conflict matrix, and illegal phase transitions
//! against the previously announced timing.

use std::collections::BTreeMap;

use crate::messages::{PhaseState, SpatPayload};
use crate::world::conflict::{ConflictMatrix, TopologyError};

use super::{Anomaly, DetectionReport, Detector, Offender};

/// Slack allowed between an announced time-to-change and the observed
/// transition, ms.
const TRANSITION_TOLERANCE_MS: u64 = 1500;

#[derive(Debug, Clone, Copy)]
struct PhaseMemory {
    state: PhaseState,
    time_to_change_ms: u32,
    gen_time_ms: u64,
}

/// Stateful SPaT checker; keeps the previous message per signal group to
/// judge transitions.
#[derive(Debug, Clone, Default)]
pub struct SpatChecker {
    history: BTreeMap<u8, PhaseMemory>,
}

impl SpatChecker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Checks one SPaT message. A conflicting-greens finding dominates;
    /// otherwise unannounced red-to-green transitions are flagged as stream
    /// inconsistencies. Fails when the message references a group the
    /// conflict matrix does not know.
    pub fn check(
        &mut self,
        spat: &SpatPayload,
        digest: [u8; 32],
        cm: &ConflictMatrix,
    ) -> Result<Option<DetectionReport>, TopologyError> {
        for ph in &spat.phases {
            cm.index_of(ph.signal_group)?;
        }

        let greens: Vec<u8> = spat
            .phases
            .iter()
            .filter(|p| p.state == PhaseState::Green)
            .map(|p| p.signal_group)
            .collect();
        let mut conflicting = false;
        'outer: for (i, &a) in greens.iter().enumerate() {
            for &b in greens.iter().skip(i + 1) {
                if cm.conflicts(a, b)? {
                    conflicting = true;
                    break 'outer;
                }
            }
        }

        let mut illegal_transition = false;
        for ph in &spat.phases {
            if let Some(prev) = self.history.get(&ph.signal_group) {
                let elapsed = spat.gen_time_ms.saturating_sub(prev.gen_time_ms);
                if prev.state == PhaseState::Red
                    && ph.state == PhaseState::Green
                    && prev.time_to_change_ms as u64 > elapsed + TRANSITION_TOLERANCE_MS
                {
                    illegal_transition = true;
                }
            }
        }

        for ph in &spat.phases {
            self.history.insert(
                ph.signal_group,
                PhaseMemory {
                    state: ph.state,
                    time_to_change_ms: ph.time_to_change_ms,
                    gen_time_ms: spat.gen_time_ms,
                },
            );
        }

        let report = |anomaly| DetectionReport {
            detector: Detector::SpatConflict,
            anomaly,
            offender: Offender::Station(spat.sender),
            evidence: vec![digest],
            tracks: None,
            source: None,
            ttc_ms: None,
            sim_time_ms: spat.gen_time_ms,
        };
        if conflicting {
            Ok(Some(report(Anomaly::ConflictingGreens)))
        } else if illegal_transition {
            Ok(Some(report(Anomaly::InconsistentStream)))
        } else {
            Ok(None)
        }
    }
}

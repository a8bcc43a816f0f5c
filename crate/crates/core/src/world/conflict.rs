//! Conflict matrix over signal groups, derived from the MAP lane topology
//! and the lane centerline geometry: two groups conflict when any of their
//! governed connection paths geometrically cross.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Polyline;
use crate::messages::MapPayload;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    /// A referenced signal group governs no lane, or a lane has no geometry.
    #[error("malformed topology: {0}")]
    MalformedTopology(String),
    /// A SPaT message referenced a group the matrix does not know.
    #[error("unknown signal group {0}")]
    UnknownSignalGroup(u8),
}

/// Symmetric boolean relation over signal groups with a false diagonal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictMatrix {
    groups: Vec<u8>,
    bits: Vec<bool>,
}

impl ConflictMatrix {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[u8] {
        &self.groups
    }

    pub fn index_of(&self, group: u8) -> Result<usize, TopologyError> {
        self.groups
            .binary_search(&group)
            .map_err(|_| TopologyError::UnknownSignalGroup(group))
    }

    /// Whether groups `a` and `b` must never be simultaneously green.
    pub fn conflicts(&self, a: u8, b: u8) -> Result<bool, TopologyError> {
        let i = self.index_of(a)?;
        let j = self.index_of(b)?;
        Ok(self.bits[i * self.groups.len() + j])
    }

    fn set(&mut self, i: usize, j: usize) {
        let n = self.groups.len();
        self.bits[i * n + j] = true;
        self.bits[j * n + i] = true;
    }
}

/// Builds the conflict matrix for a MAP. `geometry` maps each lane id to the
/// centerline of its connection path through the intersection box.
pub fn build_conflict_matrix(
    map: &MapPayload,
    geometry: &BTreeMap<u16, Polyline>,
) -> Result<ConflictMatrix, TopologyError> {
    if map.lanes.is_empty() {
        return Err(TopologyError::MalformedTopology("MAP has no lanes".into()));
    }
    let mut groups: Vec<u8> = map.lanes.iter().map(|l| l.signal_group).collect();
    groups.sort_unstable();
    groups.dedup();

    let mut by_group: BTreeMap<u8, Vec<&Polyline>> = BTreeMap::new();
    for lane in &map.lanes {
        let line = geometry.get(&lane.lane_id).ok_or_else(|| {
            TopologyError::MalformedTopology(format!("lane {} has no centerline", lane.lane_id))
        })?;
        by_group.entry(lane.signal_group).or_default().push(line);
    }
    for g in &groups {
        if by_group.get(g).map_or(true, |v| v.is_empty()) {
            return Err(TopologyError::MalformedTopology(format!("group {g} governs no lane")));
        }
    }

    let n = groups.len();
    let mut cm = ConflictMatrix { groups: groups.clone(), bits: vec![false; n * n] };
    for i in 0..n {
        for j in (i + 1)..n {
            let a = &by_group[&groups[i]];
            let b = &by_group[&groups[j]];
            if a.iter().any(|la| b.iter().any(|lb| la.crosses(lb))) {
                cm.set(i, j);
            }
        }
    }
    Ok(cm)
}

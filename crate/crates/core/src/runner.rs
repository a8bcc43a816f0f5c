//! Scenario execution: load a fixture, run the world to completion, and
//! produce trace plus metrics.

use std::path::Path;
use std::time::Instant;

use crate::metrics::{compute_metrics, RunMetrics};
use crate::world::fixture::{load_fixture, FixtureError, Scenario};
use crate::world::trace::Trace;
use crate::world::World;

pub struct RunOutput {
    pub trace: Trace,
    pub metrics: RunMetrics,
    pub hmi: std::collections::BTreeMap<crate::messages::StationId, Vec<crate::agents::HmiEntry>>,
}

/// Loads and validates a fixture file from disk with overrides applied.
pub fn load_fixture_file(
    path: &Path,
    overrides: &[(String, String)],
    seed_fallback: Option<u64>,
) -> Result<Scenario, FixtureError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| FixtureError::Io(format!("{}: {e}", path.display())))?;
    load_fixture(&text, overrides, seed_fallback)
}

/// Runs one scenario to completion.
pub fn run_scenario(scenario: Scenario) -> Result<RunOutput, FixtureError> {
    let started = Instant::now();
    let mut world = World::new(scenario)?;
    world.run_to_end();
    let runtime_ms = started.elapsed().as_millis() as u64;
    let metrics =
        compute_metrics(&world.scenario, &world.trace, world.min_pair_distance, runtime_ms);
    let hmi = world.hmi_logs();
    Ok(RunOutput { trace: world.trace, metrics, hmi })
}

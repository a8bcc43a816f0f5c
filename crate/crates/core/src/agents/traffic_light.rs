//! Traffic-light controller: fixed-cycle phase program, SPaT/MAP broadcast,
//! and the override interface used by mitigation. When compromised, the
//! broadcast diverges from the physical lights and override requests are
//! honored only with the configured probability.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::AttackRuntime;
use crate::messages::{
    encode, MapPayload, Payload, PhaseState, SpatPayload, SpatPhase, StationId,
};
use crate::mitigation::{ActionOutcome, OverrideTarget};
use crate::trust::Hsm;
use crate::world::fixture::{ProgramInterval, SpatAttackMode, STEP_MS};
use crate::world::trace::{digest_hex, TraceEvent};

use super::{TickCtx, TickOut};

/// SPaT and MAP are broadcast every this many steps (1 Hz).
pub const SPAT_PERIOD_STEPS: u64 = 10;
/// Time-to-change advertised while an override or attack state persists.
const STATIC_TTC_MS: u32 = 30_000;

pub struct TrafficLightAgent {
    pub station: StationId,
    hsm: Hsm,
    program: Vec<ProgramInterval>,
    cycle_ms: u64,
    groups: Vec<u8>,
    map: MapPayload,
    honor_probability: f64,
    rng: ChaCha8Rng,
    /// Accepted override and the time it takes physical effect.
    override_state: Option<(OverrideTarget, u64)>,
}

impl TrafficLightAgent {
    pub fn new(
        station: StationId,
        hsm: Hsm,
        program: Vec<ProgramInterval>,
        groups: Vec<u8>,
        map: MapPayload,
        honor_probability: f64,
        rng: ChaCha8Rng,
    ) -> Self {
        let cycle_ms = program.iter().map(|i| i.green_ms + i.yellow_ms + i.all_red_ms).sum();
        Self {
            station,
            hsm,
            program,
            cycle_ms,
            groups,
            map,
            honor_probability,
            rng,
            override_state: None,
        }
    }

    /// State the physical lamps show for `group` at `t_ms`.
    pub fn physical_state(&self, group: u8, t_ms: u64) -> PhaseState {
        if let Some((target, from_ms)) = self.override_state {
            if t_ms >= from_ms {
                return match target {
                    OverrideTarget::RedYellowBlinking => PhaseState::RedYellowBlinking,
                    OverrideTarget::AllRed => PhaseState::Red,
                };
            }
        }
        self.program_state(group, t_ms).0
    }

    /// Program phase and remaining time for one group.
    fn program_state(&self, group: u8, t_ms: u64) -> (PhaseState, u32) {
        let cycle_pos = t_ms % self.cycle_ms;
        let mut acc = 0u64;
        let mut current = None;
        for interval in &self.program {
            let len = interval.green_ms + interval.yellow_ms + interval.all_red_ms;
            if cycle_pos < acc + len && current.is_none() {
                let into = cycle_pos - acc;
                let is_green_group = interval.greens.contains(&group);
                let (state, remaining) = if into < interval.green_ms {
                    let rem = interval.green_ms - into;
                    if is_green_group {
                        (PhaseState::Green, rem)
                    } else {
                        (PhaseState::Red, self.time_until_green(group, t_ms))
                    }
                } else if into < interval.green_ms + interval.yellow_ms {
                    let rem = interval.green_ms + interval.yellow_ms - into;
                    if is_green_group {
                        (PhaseState::Yellow, rem)
                    } else {
                        (PhaseState::Red, self.time_until_green(group, t_ms))
                    }
                } else {
                    (PhaseState::Red, self.time_until_green(group, t_ms))
                };
                current = Some((state, remaining as u32));
            }
            acc += len;
        }
        current.unwrap_or((PhaseState::Red, STATIC_TTC_MS))
    }

    /// Milliseconds until `group` next turns green, scanning forward through
    /// the cycle.
    fn time_until_green(&self, group: u8, t_ms: u64) -> u64 {
        let cycle_pos = t_ms % self.cycle_ms;
        let mut starts = Vec::new();
        let mut acc = 0u64;
        for interval in &self.program {
            if interval.greens.contains(&group) {
                starts.push(acc);
            }
            acc += interval.green_ms + interval.yellow_ms + interval.all_red_ms;
        }
        starts
            .iter()
            .map(|&s| {
                if s > cycle_pos {
                    s - cycle_pos
                } else {
                    s + self.cycle_ms - cycle_pos
                }
            })
            .min()
            .unwrap_or(self.cycle_ms)
    }

    fn honest_spat(&self, t_ms: u64) -> SpatPayload {
        let phases = self
            .groups
            .iter()
            .map(|&g| {
                if let Some((target, from_ms)) = self.override_state {
                    if t_ms >= from_ms {
                        let state = match target {
                            OverrideTarget::RedYellowBlinking => PhaseState::RedYellowBlinking,
                            OverrideTarget::AllRed => PhaseState::Red,
                        };
                        return SpatPhase {
                            signal_group: g,
                            state,
                            time_to_change_ms: STATIC_TTC_MS,
                        };
                    }
                }
                let (state, ttc) = self.program_state(g, t_ms);
                SpatPhase { signal_group: g, state, time_to_change_ms: ttc }
            })
            .collect();
        SpatPayload { sender: self.station, phases, gen_time_ms: t_ms }
    }

    fn attacked_spat(&self, mode: &SpatAttackMode, t_ms: u64) -> SpatPayload {
        let phases = self
            .groups
            .iter()
            .map(|&g| {
                let green = match mode {
                    SpatAttackMode::AllGreen => true,
                    SpatAttackMode::ConflictingPair(a, b) => g == *a || g == *b,
                };
                SpatPhase {
                    signal_group: g,
                    state: if green { PhaseState::Green } else { PhaseState::Red },
                    time_to_change_ms: STATIC_TTC_MS,
                }
            })
            .collect();
        SpatPayload { sender: self.station, phases, gen_time_ms: t_ms }
    }

    /// Handles an override request. Honored unless the controller is
    /// compromised, in which case the configured honor probability decides.
    /// The physical change takes effect next step. Idempotent once active.
    pub fn receive_override(
        &mut self,
        target: OverrideTarget,
        hacked: bool,
        t_ms: u64,
    ) -> ActionOutcome {
        if let Some((current, _)) = self.override_state {
            if current == target {
                return ActionOutcome::Delivered;
            }
        }
        if hacked && self.rng.random::<f64>() >= self.honor_probability {
            return ActionOutcome::Ignored;
        }
        self.override_state = Some((target, t_ms + STEP_MS));
        ActionOutcome::Delivered
    }

    pub fn tick(&mut self, ctx: &TickCtx, attack: &mut AttackRuntime) -> TickOut {
        let mut out = TickOut::default();
        if ctx.step % SPAT_PERIOD_STEPS != 0 {
            return out;
        }
        let spat = match attack.spat_mode(ctx.t_ms) {
            Some(mode) => self.attacked_spat(mode, ctx.t_ms),
            None => self.honest_spat(ctx.t_ms),
        };
        let mut map = self.map.clone();
        map.sender = self.station;
        for payload in [Payload::Map(map), Payload::Spat(spat)] {
            let bytes = encode(&payload).expect("light payloads are valid");
            if let Ok(msg) = self.hsm.sign(&bytes) {
                let msg = Arc::new(msg);
                out.events.push(TraceEvent::Tx {
                    step: ctx.step,
                    t_ms: ctx.t_ms,
                    station: self.station,
                    msg_type: payload.kind_label().to_string(),
                    digest: digest_hex(&msg.digest()),
                });
                out.emissions.push(msg);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use crate::messages::{Approach, MapLane};
    use crate::trust::{PermissionSet, Pki};

    fn light(honor: f64) -> TrafficLightAgent {
        let pki = Pki::new(1);
        let hsm = pki.issue_station(
            StationId(3),
            PermissionSet::SEND_SPAT.union(PermissionSet::SEND_MAP),
        );
        let map = MapPayload {
            sender: StationId(3),
            lanes: vec![
                MapLane { lane_id: 1, ingress: Approach::N, egress: Approach::S, signal_group: 0 },
                MapLane { lane_id: 2, ingress: Approach::E, egress: Approach::W, signal_group: 2 },
            ],
        };
        TrafficLightAgent::new(
            StationId(3),
            hsm,
            vec![
                ProgramInterval { greens: vec![0], green_ms: 10_000, yellow_ms: 2_000, all_red_ms: 1_000 },
                ProgramInterval { greens: vec![2], green_ms: 10_000, yellow_ms: 2_000, all_red_ms: 1_000 },
            ],
            vec![0, 2],
            map,
            honor,
            ChaCha8Rng::seed_from_u64(5),
        )
    }

    #[test]
    fn program_cycles_through_phases() {
        let l = light(0.0);
        assert_eq!(l.physical_state(0, 0), PhaseState::Green);
        assert_eq!(l.physical_state(2, 0), PhaseState::Red);
        assert_eq!(l.physical_state(0, 10_500), PhaseState::Yellow);
        assert_eq!(l.physical_state(0, 12_500), PhaseState::Red);
        assert_eq!(l.physical_state(2, 13_000), PhaseState::Green);
        // Wraps around the 26 s cycle.
        assert_eq!(l.physical_state(0, 26_000), PhaseState::Green);
    }

    #[test]
    fn time_to_change_is_honest() {
        let l = light(0.0);
        let spat = l.honest_spat(4_000);
        let g0 = spat.phases.iter().find(|p| p.signal_group == 0).unwrap();
        assert_eq!(g0.state, PhaseState::Green);
        assert_eq!(g0.time_to_change_ms, 6_000);
        let g2 = spat.phases.iter().find(|p| p.signal_group == 2).unwrap();
        assert_eq!(g2.state, PhaseState::Red);
        // Green for group 2 starts at 13 s.
        assert_eq!(g2.time_to_change_ms, 9_000);
    }

    #[test]
    fn honored_override_takes_effect_next_step() {
        let mut l = light(0.0);
        let outcome = l.receive_override(OverrideTarget::RedYellowBlinking, false, 5_000);
        assert_eq!(outcome, ActionOutcome::Delivered);
        // Same step unchanged, next step blinking.
        assert_eq!(l.physical_state(0, 5_000), PhaseState::Green);
        assert_eq!(l.physical_state(0, 5_100), PhaseState::RedYellowBlinking);
        // Broadcast follows.
        let spat = l.honest_spat(6_000);
        assert!(spat.phases.iter().all(|p| p.state == PhaseState::RedYellowBlinking));
        // Idempotent.
        assert_eq!(
            l.receive_override(OverrideTarget::RedYellowBlinking, false, 6_000),
            ActionOutcome::Delivered
        );
    }

    #[test]
    fn hacked_light_ignores_overrides_at_zero_honor() {
        let mut l = light(0.0);
        for _ in 0..10 {
            assert_eq!(
                l.receive_override(OverrideTarget::RedYellowBlinking, true, 5_000),
                ActionOutcome::Ignored
            );
        }
        assert_eq!(l.physical_state(0, 6_000), PhaseState::Green);
    }

    #[test]
    fn hacked_light_with_full_honor_complies() {
        let mut l = light(1.0);
        assert_eq!(
            l.receive_override(OverrideTarget::AllRed, true, 5_000),
            ActionOutcome::Delivered
        );
        assert_eq!(l.physical_state(0, 5_100), PhaseState::Red);
    }
}

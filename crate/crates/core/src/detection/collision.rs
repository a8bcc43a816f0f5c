//! Closest-point-of-approach collision prediction between a pedestrian
//! track and vehicle threat tracks, by linear extrapolation of both parties.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agents::track::Track;

use super::{Anomaly, DetectionConfig, DetectionReport, Detector, Offender, TrackRef};

/// Closed-form closest point of approach for two linearly extrapolated
/// points. Returns `(t_star_s, min_dist_m)` with `t_star_s >= 0`; for
/// diverging or relatively static pairs the minimum is now.
pub fn closest_point_of_approach(
    p_rel: (f64, f64),
    v_rel: (f64, f64),
) -> (f64, f64) {
    let rv = p_rel.0 * v_rel.0 + p_rel.1 * v_rel.1;
    let vv = v_rel.0 * v_rel.0 + v_rel.1 * v_rel.1;
    if vv < 1e-9 {
        return (0.0, p_rel.0.hypot(p_rel.1));
    }
    let t = (-rv / vv).max(0.0);
    let dx = p_rel.0 + v_rel.0 * t;
    let dy = p_rel.1 + v_rel.1 * t;
    (t, dx.hypot(dy))
}

/// A track reduced to the current point and an estimated velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub subject: TrackRef,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl TrackState {
    /// Extracts position and least-squares velocity from a track, requiring
    /// at least two samples.
    pub fn from_track(track: &Track, velocity_window: usize) -> Option<TrackState> {
        let &(_, latest) = track.latest()?;
        let (vx, vy) = track.lsq_velocity(velocity_window.max(2))?;
        Some(TrackState { subject: track.subject, x: latest.x, y: latest.y, vx, vy })
    }

    /// Same extraction but trusting the reported velocity vector instead of
    /// estimating it, for subjects that know their own motion.
    pub fn from_self_knowledge(subject: TrackRef, x: f64, y: f64, vx: f64, vy: f64) -> TrackState {
        TrackState { subject, x, y, vx, vy }
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

/// Stateful collision predictor; a pair must stay on collision course for
/// `collision_window_k` consecutive evaluations before a warning fires.
#[derive(Debug, Clone, Default)]
pub struct CollisionPredictor {
    runs: BTreeMap<(TrackRef, TrackRef), u32>,
}

impl CollisionPredictor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Evaluates the pedestrian against each threat track. Emits at most one
    /// report per call, for the soonest predicted collision.
    pub fn evaluate(
        &mut self,
        vru: &TrackState,
        threats: &[TrackState],
        offender_of: impl Fn(&TrackRef) -> Offender,
        cfg: &DetectionConfig,
        sim_time_ms: u64,
    ) -> Option<DetectionReport> {
        let mut next: BTreeMap<(TrackRef, TrackRef), u32> = BTreeMap::new();
        let mut best: Option<(f64, &TrackState)> = None;

        if vru.speed() >= cfg.collision_min_vru_speed {
            for threat in threats {
                if threat.speed() < cfg.collision_min_threat_speed {
                    continue;
                }
                let (t_star, min_dist) = closest_point_of_approach(
                    (threat.x - vru.x, threat.y - vru.y),
                    (threat.vx - vru.vx, threat.vy - vru.vy),
                );
                if min_dist < cfg.collision_dmin
                    && t_star <= cfg.collision_horizon_s
                    && t_star > 0.0
                {
                    let key = (vru.subject, threat.subject);
                    let run = self.runs.get(&key).copied().unwrap_or(0) + 1;
                    next.insert(key, run);
                    if run >= cfg.collision_window_k
                        && best.map_or(true, |(bt, _)| t_star < bt)
                    {
                        best = Some((t_star, threat));
                    }
                }
            }
        }
        self.runs = next;

        best.map(|(t_star, threat)| DetectionReport {
            detector: Detector::VruCollision,
            anomaly: Anomaly::ImminentCollision,
            offender: offender_of(&threat.subject),
            evidence: vec![],
            tracks: Some((vru.subject, threat.subject)),
            source: None,
            ttc_ms: Some((t_star * 1000.0) as u64),
            sim_time_ms,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messages::StationId;

    fn cfg() -> DetectionConfig {
        DetectionConfig { collision_window_k: 1, ..DetectionConfig::default() }
    }

    fn vru(x: f64, y: f64, vx: f64, vy: f64) -> TrackState {
        TrackState::from_self_knowledge(TrackRef::UwbTag(1), x, y, vx, vy)
    }

    fn vehicle(x: f64, y: f64, vx: f64, vy: f64) -> TrackState {
        TrackState { subject: TrackRef::Station(StationId(9)), x, y, vx, vy }
    }

    #[test]
    fn orthogonal_paths_meeting_at_origin() {
        // Pedestrian walks +x at 1 m/s from (-2, 0); vehicle drives -y at
        // 10 m/s from (0, 20). Both reach the origin at t = 2 s.
        let mut cp = CollisionPredictor::new();
        let r = cp
            .evaluate(
                &vru(-2.0, 0.0, 1.0, 0.0),
                &[vehicle(0.0, 20.0, 0.0, -10.0)],
                |t| match t {
                    TrackRef::Station(s) => Offender::Station(*s),
                    _ => Offender::Unknown,
                },
                &cfg(),
                0,
            )
            .expect("collision predicted");
        let ttc = r.ttc_ms.unwrap() as f64 / 1000.0;
        assert!((ttc - 2.0).abs() < 0.05, "ttc {ttc}");
        assert_eq!(r.offender, Offender::Station(StationId(9)));
        assert!(r.is_well_formed());
    }

    #[test]
    fn parallel_paths_stay_silent() {
        let mut cp = CollisionPredictor::new();
        let r = cp.evaluate(
            &vru(0.0, 0.0, 1.0, 0.0),
            &[vehicle(0.0, 10.0, 10.0, 0.0)],
            |_| Offender::Unknown,
            &cfg(),
            0,
        );
        assert!(r.is_none());
    }

    #[test]
    fn stopped_vehicle_is_no_threat() {
        // Honestly stopped at the line while the pedestrian crosses: zero
        // vehicle velocity, below the threat speed floor.
        let mut cp = CollisionPredictor::new();
        let r = cp.evaluate(
            &vru(-4.0, 0.0, 1.4, 0.0),
            &[vehicle(0.0, 1.0, 0.0, 0.0)],
            |_| Offender::Unknown,
            &cfg(),
            0,
        );
        assert!(r.is_none());
    }

    #[test]
    fn stationary_pedestrian_not_extrapolated() {
        let mut cp = CollisionPredictor::new();
        let r = cp.evaluate(
            &vru(-4.0, 0.0, 0.0, 0.0),
            &[vehicle(-4.0, 30.0, 0.0, -10.0)],
            |_| Offender::Unknown,
            &cfg(),
            0,
        );
        assert!(r.is_none(), "a waiting pedestrian is not on a crossing course");
    }

    #[test]
    fn beyond_horizon_is_ignored() {
        let mut cp = CollisionPredictor::new();
        // Meeting point 6 s out, past the 4 s horizon.
        let r = cp.evaluate(
            &vru(-6.0, 0.0, 1.0, 0.0),
            &[vehicle(0.0, 60.0, 0.0, -10.0)],
            |_| Offender::Unknown,
            &cfg(),
            0,
        );
        assert!(r.is_none());
    }

    #[test]
    fn window_requires_consecutive_confirmation() {
        let c = DetectionConfig { collision_window_k: 2, ..DetectionConfig::default() };
        let mut cp = CollisionPredictor::new();
        let v = vru(-2.0, 0.0, 1.0, 0.0);
        let t = [vehicle(0.0, 20.0, 0.0, -10.0)];
        assert!(cp.evaluate(&v, &t, |_| Offender::Unknown, &c, 0).is_none());
        assert!(cp.evaluate(&v, &t, |_| Offender::Unknown, &c, 100).is_some());
    }

    #[test]
    fn soonest_threat_wins() {
        let mut cp = CollisionPredictor::new();
        let near = vehicle(0.0, 10.0, 0.0, -10.0);
        let far = TrackState { subject: TrackRef::Station(StationId(10)), ..vehicle(0.0, 30.0, 0.0, -10.0) };
        let r = cp
            .evaluate(
                &vru(-1.0, 0.0, 1.0, 0.0),
                &[far, near],
                |t| match t {
                    TrackRef::Station(s) => Offender::Station(*s),
                    _ => Offender::Unknown,
                },
                &cfg(),
                0,
            )
            .unwrap();
        assert_eq!(r.offender, Offender::Station(StationId(9)));
    }

    #[test]
    fn cpa_closed_form() {
        // Relative position (3, 4), relative velocity (-3, -4): head-on,
        // distance 5 closing at 5 m/s -> t* = 1 s, min dist 0.
        let (t, d) = closest_point_of_approach((3.0, 4.0), (-3.0, -4.0));
        assert!((t - 1.0).abs() < 1e-12);
        assert!(d < 1e-9);
        // Diverging: minimum is now.
        let (t, d) = closest_point_of_approach((3.0, 4.0), (3.0, 4.0));
        assert_eq!(t, 0.0);
        assert!((d - 5.0).abs() < 1e-12);
    }
}

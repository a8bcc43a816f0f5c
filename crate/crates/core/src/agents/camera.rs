//! Roadside camera covering the intersection: detects actors inside its
//! field of view, adds seeded Gaussian position noise, and estimates object
//! speed and heading from its own noisy position history.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::geom::wrap_angle;
use crate::messages::{FieldOfView, KinematicState, PerceivedObject, StationId};

use super::TruthActor;

/// Samples kept per object for speed estimation.
const SPEED_HISTORY: usize = 12;
/// Displacement window (in samples) for the reported speed estimate.
const SPEED_WINDOW: usize = 8;

pub struct CameraAgent {
    pub fov: FieldOfView,
    sigma: f64,
    detection_probability: f64,
    confidence: f64,
    rng: ChaCha8Rng,
    /// Stable camera-local ids per observed station, in first-seen order.
    ids: BTreeMap<StationId, u16>,
    next_id: u16,
    history: BTreeMap<u16, VecDeque<(u64, f64, f64)>>,
}

impl CameraAgent {
    pub fn new(
        fov: FieldOfView,
        sigma: f64,
        detection_probability: f64,
        confidence: f64,
        rng: ChaCha8Rng,
    ) -> Self {
        Self {
            fov,
            sigma,
            detection_probability,
            confidence,
            rng,
            ids: BTreeMap::new(),
            next_id: 1,
            history: BTreeMap::new(),
        }
    }

    fn object_id(&mut self, station: StationId) -> u16 {
        if let Some(&id) = self.ids.get(&station) {
            return id;
        }
        let id = self.next_id;
        self.next_id += 1;
        self.ids.insert(station, id);
        id
    }

    /// One detection pass over the ground truth. Returns the perceived
    /// objects plus the object-id-to-station links (ground truth used by the
    /// attack injector only). Iterates actors in the given slot order so
    /// noise draws are invariant under station renaming.
    pub fn observe(
        &mut self,
        truth: &[TruthActor],
        t_ms: u64,
    ) -> (Vec<PerceivedObject>, BTreeMap<u16, StationId>) {
        let mut objects = Vec::new();
        let mut stations = BTreeMap::new();
        let noise = Normal::new(0.0, self.sigma.max(1e-12)).expect("valid sigma");
        for actor in truth {
            if !self.fov.contains(actor.state.x, actor.state.y) {
                continue;
            }
            let detected = self.detection_probability >= 1.0
                || self.rng.random::<f64>() < self.detection_probability;
            if !detected {
                continue;
            }
            let (nx, ny) = if self.sigma > 0.0 {
                (self.rng.sample(noise), self.rng.sample(noise))
            } else {
                (0.0, 0.0)
            };
            let x = actor.state.x + nx;
            let y = actor.state.y + ny;
            let id = self.object_id(actor.station);
            let hist = self.history.entry(id).or_default();
            if hist.len() == SPEED_HISTORY {
                hist.pop_front();
            }
            hist.push_back((t_ms, x, y));

            let (speed, heading) = estimate_motion(hist);
            objects.push(PerceivedObject {
                object_id: id,
                state: KinematicState { x, y, heading, speed, accel: 0.0 },
                confidence: self.confidence,
                class: actor.class,
            });
            stations.insert(id, actor.station);
        }
        (objects, stations)
    }
}

/// Endpoint-displacement speed and heading over the available history.
fn estimate_motion(hist: &VecDeque<(u64, f64, f64)>) -> (f64, f64) {
    let n = hist.len();
    if n < 2 {
        return (0.0, 0.0);
    }
    let span = SPEED_WINDOW.min(n - 1);
    let (t0, x0, y0) = hist[n - 1 - span];
    let (t1, x1, y1) = hist[n - 1];
    let dt = (t1 - t0) as f64 / 1000.0;
    if dt <= 0.0 {
        return (0.0, 0.0);
    }
    let vx = (x1 - x0) / dt;
    let vy = (y1 - y0) / dt;
    let speed = vx.hypot(vy).min(100.0);
    let heading = if speed > 0.05 { wrap_angle(vy.atan2(vx)) } else { 0.0 };
    (speed, heading)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use crate::messages::ObjectClass;

    fn fov() -> FieldOfView {
        FieldOfView {
            origin_x: 0.0,
            origin_y: 0.0,
            orientation: 0.0,
            range: 100.0,
            half_angle: std::f64::consts::PI,
        }
    }

    fn actor(station: u32, x: f64, y: f64, speed: f64) -> TruthActor {
        TruthActor {
            station: StationId(station),
            class: ObjectClass::Vehicle,
            state: KinematicState::new(x, y, 0.0, speed, 0.0),
            uwb_tag: None,
        }
    }

    #[test]
    fn only_in_fov_actors_are_reported() {
        let mut cam =
            CameraAgent::new(fov(), 0.0, 1.0, 0.95, ChaCha8Rng::seed_from_u64(1));
        let (objects, _) = cam.observe(
            &[actor(11, 10.0, 0.0, 5.0), actor(12, 500.0, 0.0, 5.0)],
            0,
        );
        assert_eq!(objects.len(), 1);
        assert_eq!(objects[0].state.x, 10.0);
    }

    #[test]
    fn object_ids_are_stable_across_steps() {
        let mut cam =
            CameraAgent::new(fov(), 0.0, 1.0, 0.95, ChaCha8Rng::seed_from_u64(1));
        let (a, map_a) = cam.observe(&[actor(11, 10.0, 0.0, 5.0), actor(12, -10.0, 0.0, 5.0)], 0);
        let (b, map_b) =
            cam.observe(&[actor(11, 11.0, 0.0, 5.0), actor(12, -11.0, 0.0, 5.0)], 100);
        assert_eq!(a[0].object_id, b[0].object_id);
        assert_eq!(map_a, map_b);
    }

    #[test]
    fn speed_estimate_converges_on_linear_motion() {
        let mut cam =
            CameraAgent::new(fov(), 0.0, 1.0, 0.95, ChaCha8Rng::seed_from_u64(1));
        let mut last = None;
        for k in 0..12u64 {
            let (objs, _) = cam.observe(&[actor(11, k as f64, 0.0, 10.0)], k * 100);
            last = Some(objs[0]);
        }
        let obj = last.unwrap();
        assert!((obj.state.speed - 10.0).abs() < 1e-9, "speed {}", obj.state.speed);
        assert!(obj.state.heading.abs() < 1e-9);
    }

    #[test]
    fn detection_probability_drops_objects() {
        let mut cam =
            CameraAgent::new(fov(), 0.0, 0.5, 0.95, ChaCha8Rng::seed_from_u64(7));
        let mut seen = 0;
        for k in 0..1000u64 {
            let (objs, _) = cam.observe(&[actor(11, 10.0, 0.0, 0.0)], k * 100);
            seen += objs.len();
        }
        assert!((400..=600).contains(&seen), "seen {seen}");
    }

    #[test]
    fn noise_has_configured_scale() {
        let mut cam =
            CameraAgent::new(fov(), 0.2, 1.0, 0.95, ChaCha8Rng::seed_from_u64(9));
        let mut sq = 0.0;
        let n = 2000;
        for k in 0..n {
            let (objs, _) = cam.observe(&[actor(11, 10.0, 5.0, 0.0)], k * 100);
            sq += (objs[0].state.x - 10.0).powi(2) + (objs[0].state.y - 5.0).powi(2);
        }
        let sigma = (sq / (2 * n) as f64).sqrt();
        assert!((0.18..=0.22).contains(&sigma), "sigma {sigma}");
    }
}

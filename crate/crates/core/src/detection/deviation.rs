//! Deviation between a station's self-reported motion and roadside
//! perception of the same physical object: the stop-lie detector.
//!
//! Both sides are windowed the same way so the comparison is lag-matched:
//! the mean of reported speeds over the window against the
//! endpoint-displacement speed of the perceived track over the same span.
//! Successive displacement estimates use disjoint noise samples, so the
//! `window_k` consecutive-exceedance rule multiplies independent error
//! probabilities.

use std::collections::BTreeMap;

use crate::agents::track::Track;
use crate::messages::StationId;

use super::{Anomaly, DetectionConfig, DetectionReport, Detector, Offender};

/// Reported-speed slope below which a stream counts as "trending to a stop",
/// m/s over the window.
const TREND_DELTA: f64 = -0.25;
/// Reported speed below which the stream already claims a stop, m/s.
const STOPPED_SPEED: f64 = 1.0;

#[derive(Debug, Clone, Default)]
pub struct StopLieDetector {
    runs: BTreeMap<StationId, u32>,
}

impl StopLieDetector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Compares one station's CAM track against the associated perceived
    /// track. `sigma_pos` is the perception position noise used to derive
    /// the combined speed-estimate deviation gate.
    pub fn check(
        &mut self,
        station: StationId,
        cam_track: &Track,
        perceived_track: &Track,
        cam_digest: [u8; 32],
        sigma_pos: f64,
        cfg: &DetectionConfig,
        sim_time_ms: u64,
    ) -> Option<DetectionReport> {
        let w = cfg.speed_window;
        let run = self.runs.entry(station).or_insert(0);

        let condition = (|| {
            let cam_mean = cam_track.mean_reported_speed(w)?;
            let perceived = perceived_track.displacement_speed(w)?;
            let span_s = w as f64 * 0.1;
            // Two noisy endpoints, both axes: sigma of the displacement
            // speed estimate. Reported speeds carry no estimation noise.
            let sigma_combined = std::f64::consts::SQRT_2 * sigma_pos / span_s;
            let deviating = (cam_mean - perceived).abs() > 3.0 * sigma_combined;
            let trending = cam_track.reported_speed_delta(w)? < TREND_DELTA
                || cam_track.latest()?.1.speed < STOPPED_SPEED;
            Some(deviating && trending && perceived >= 5.0)
        })()
        .unwrap_or(false);

        if condition {
            *run += 1;
            if *run == cfg.window_k {
                return Some(DetectionReport {
                    detector: Detector::CamPerceptionDeviation,
                    anomaly: Anomaly::StopLie,
                    offender: Offender::Station(station),
                    evidence: vec![cam_digest],
                    tracks: None,
                    source: None,
                    ttc_ms: None,
                    sim_time_ms,
                });
            }
        } else {
            *run = 0;
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{MeasurementSource, TrackRef};
    use crate::messages::KinematicState;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const SIGMA: f64 = 0.2;

    fn tracks() -> (Track, Track) {
        (
            Track::new(TrackRef::Station(StationId(9)), MeasurementSource::Cam),
            Track::new(TrackRef::LocalObject(1), MeasurementSource::Cpm),
        )
    }

    fn state(x: f64, speed: f64) -> KinematicState {
        KinematicState::new(x, 0.0, 0.0, speed, 0.0)
    }

    #[test]
    fn stop_lie_fires_when_cam_claims_stop_while_moving() {
        let mut det = StopLieDetector::new();
        let cfg = DetectionConfig::default();
        let (mut cam, mut perc) = tracks();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, SIGMA).unwrap();
        let mut fired = None;
        for k in 0..40u64 {
            let t = k as f64 * 0.1;
            // CAM claims a firm deceleration to zero; the camera sees a
            // constant 10 m/s.
            let fake_v = (10.0 - 6.0 * t).max(0.0);
            let fake_x = 10.0 * t.min(10.0 / 6.0) - 3.0 * t.min(10.0 / 6.0).powi(2);
            cam.push(k * 100, state(fake_x, fake_v));
            perc.push(k * 100, state(10.0 * t + noise.sample(&mut rng), 10.0));
            if let Some(r) =
                det.check(StationId(9), &cam, &perc, [1; 32], SIGMA, &cfg, k * 100)
            {
                assert_eq!(r.anomaly, Anomaly::StopLie);
                fired = Some(k);
                break;
            }
        }
        let fired = fired.expect("must fire");
        assert!(fired <= 14, "fired at step {fired}");
    }

    #[test]
    fn extreme_disagreement_fires() {
        // CAM says stopped, camera sees 10 m/s: deviation ~10 m/s.
        let mut det = StopLieDetector::new();
        let cfg = DetectionConfig::default();
        let (mut cam, mut perc) = tracks();
        let mut fired = false;
        for k in 0..12u64 {
            cam.push(k * 100, state(50.0, 0.0));
            perc.push(k * 100, state(k as f64, 10.0));
            if det
                .check(StationId(9), &cam, &perc, [1; 32], SIGMA, &cfg, k * 100)
                .is_some()
            {
                fired = true;
                break;
            }
        }
        assert!(fired);
    }

    #[test]
    fn honest_braking_agrees_and_stays_silent() {
        let mut det = StopLieDetector::new();
        let cfg = DetectionConfig::default();
        let (mut cam, mut perc) = tracks();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, SIGMA).unwrap();
        let mut x = 0.0f64;
        let mut v = 12.0f64;
        for k in 0..60u64 {
            cam.push(k * 100, state(x, v));
            perc.push(k * 100, state(x + noise.sample(&mut rng), v));
            assert!(det
                .check(StationId(9), &cam, &perc, [1; 32], SIGMA, &cfg, k * 100)
                .is_none());
            // Brake at 3 m/s^2 from step 20.
            let a = if k >= 20 && v > 0.0 { -3.0 } else { 0.0 };
            x += v * 0.1 + 0.5 * a * 0.01;
            v = (v + a * 0.1).max(0.0);
        }
    }

    #[test]
    fn single_step_disagreement_is_filtered_by_window() {
        let mut det = StopLieDetector::new();
        let cfg = DetectionConfig::default();
        let (mut cam, mut perc) = tracks();
        for k in 0..20u64 {
            // One glitchy sample at k = 12: reported speed dips to zero for
            // a single step, then agreement resumes.
            let speed = if k == 12 { 0.0 } else { 10.0 };
            cam.push(k * 100, state(k as f64, speed));
            perc.push(k * 100, state(k as f64, 10.0));
            assert!(det
                .check(StationId(9), &cam, &perc, [1; 32], SIGMA, &cfg, k * 100)
                .is_none());
        }
    }
}

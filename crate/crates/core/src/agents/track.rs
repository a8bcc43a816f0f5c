//! Time-ordered state history for one tracked subject, bounded to the last
//! 32 samples. Tracks back every plausibility comparison that needs more
//! than the current step.

use std::collections::VecDeque;

use crate::detection::{MeasurementSource, TrackRef};
use crate::messages::KinematicState;

pub const TRACK_CAPACITY: usize = 32;

#[derive(Debug, Clone)]
pub struct Track {
    pub subject: TrackRef,
    pub source: MeasurementSource,
    history: VecDeque<(u64, KinematicState)>,
}

impl Track {
    pub fn new(subject: TrackRef, source: MeasurementSource) -> Self {
        Self { subject, source, history: VecDeque::with_capacity(TRACK_CAPACITY) }
    }

    /// Appends a sample; rejects out-of-order timestamps to keep the history
    /// time-ordered.
    pub fn push(&mut self, time_ms: u64, state: KinematicState) -> bool {
        if let Some(&(last, _)) = self.history.back() {
            if time_ms < last {
                return false;
            }
        }
        if self.history.len() == TRACK_CAPACITY {
            self.history.pop_front();
        }
        self.history.push_back((time_ms, state));
        true
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn latest(&self) -> Option<&(u64, KinematicState)> {
        self.history.back()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(u64, KinematicState)> {
        self.history.iter()
    }

    /// Time of the most recent sample.
    pub fn last_time_ms(&self) -> Option<u64> {
        self.history.back().map(|&(t, _)| t)
    }

    /// Endpoint-displacement velocity over the last `window` intervals.
    /// Consecutive calls with the same window use disjoint endpoint pairs,
    /// which keeps successive estimates' noise independent.
    pub fn displacement_velocity(&self, window: usize) -> Option<(f64, f64)> {
        if self.history.len() < window + 1 {
            return None;
        }
        let (t1, s1) = self.history[self.history.len() - 1];
        let (t0, s0) = self.history[self.history.len() - 1 - window];
        let dt = (t1 - t0) as f64 / 1000.0;
        if dt <= 0.0 {
            return None;
        }
        Some(((s1.x - s0.x) / dt, (s1.y - s0.y) / dt))
    }

    pub fn displacement_speed(&self, window: usize) -> Option<f64> {
        self.displacement_velocity(window).map(|(vx, vy)| vx.hypot(vy))
    }

    /// Least-squares velocity over the last `n` samples. Smoother than the
    /// displacement estimate, at the cost of correlated consecutive values.
    pub fn lsq_velocity(&self, n: usize) -> Option<(f64, f64)> {
        let len = self.history.len();
        if len < n.min(3) || n < 2 {
            return None;
        }
        let n = n.min(len);
        let samples = self.history.iter().skip(len - n);
        let t0 = self.history[len - n].0;
        let mut st = 0.0;
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut stt = 0.0;
        let mut stx = 0.0;
        let mut sty = 0.0;
        for &(t, s) in samples {
            let dt = (t - t0) as f64 / 1000.0;
            st += dt;
            sx += s.x;
            sy += s.y;
            stt += dt * dt;
            stx += dt * s.x;
            sty += dt * s.y;
        }
        let nf = n as f64;
        let denom = nf * stt - st * st;
        if denom.abs() < 1e-12 {
            return None;
        }
        Some(((nf * stx - st * sx) / denom, (nf * sty - st * sy) / denom))
    }

    /// Mean of the reported speed field over the last `window + 1` samples.
    pub fn mean_reported_speed(&self, window: usize) -> Option<f64> {
        if self.history.len() < window + 1 {
            return None;
        }
        let slice = self.history.iter().skip(self.history.len() - window - 1);
        let (sum, n) = slice.fold((0.0, 0usize), |(s, n), (_, st)| (s + st.speed, n + 1));
        Some(sum / n as f64)
    }

    /// Reported speed trend over the window: current minus oldest.
    pub fn reported_speed_delta(&self, window: usize) -> Option<f64> {
        if self.history.len() < window + 1 {
            return None;
        }
        let newest = self.history[self.history.len() - 1].1.speed;
        let oldest = self.history[self.history.len() - 1 - window].1.speed;
        Some(newest - oldest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messages::StationId;

    fn state(x: f64, y: f64, speed: f64) -> KinematicState {
        KinematicState::new(x, y, 0.0, speed, 0.0)
    }

    fn track() -> Track {
        Track::new(TrackRef::Station(StationId(1)), MeasurementSource::Cam)
    }

    #[test]
    fn history_stays_time_ordered_and_bounded() {
        let mut t = track();
        assert!(t.push(100, state(0.0, 0.0, 1.0)));
        assert!(!t.push(50, state(1.0, 0.0, 1.0)), "out-of-order sample rejected");
        for k in 2..50u64 {
            assert!(t.push(k * 100, state(k as f64, 0.0, 1.0)));
        }
        assert_eq!(t.len(), TRACK_CAPACITY);
        let times: Vec<u64> = t.iter().map(|&(tm, _)| tm).collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn displacement_velocity_is_exact_on_linear_motion() {
        let mut t = track();
        for k in 0..10u64 {
            t.push(k * 100, state(1.2 * k as f64 * 0.1, 0.0, 1.2));
        }
        let (vx, vy) = t.displacement_velocity(8).unwrap();
        assert!((vx - 1.2).abs() < 1e-12);
        assert!(vy.abs() < 1e-12);
    }

    #[test]
    fn lsq_velocity_matches_truth_on_linear_motion() {
        let mut t = track();
        for k in 0..20u64 {
            t.push(k * 100, state(-3.0 + 0.7 * k as f64 * 0.1, 2.0 - 0.2 * k as f64 * 0.1, 0.73));
        }
        let (vx, vy) = t.lsq_velocity(15).unwrap();
        assert!((vx - 0.7).abs() < 1e-9);
        assert!((vy + 0.2).abs() < 1e-9);
    }

    #[test]
    fn windowed_speed_statistics() {
        let mut t = track();
        for k in 0..10u64 {
            t.push(k * 100, state(0.0, 0.0, 10.0 - k as f64));
        }
        // Speeds 10,9,...,1; last 9 samples are 9..1 -> mean 5.
        assert!((t.mean_reported_speed(8).unwrap() - 5.0).abs() < 1e-12);
        assert!((t.reported_speed_delta(8).unwrap() + 8.0).abs() < 1e-12);
    }

    #[test]
    fn estimators_need_enough_samples() {
        let mut t = track();
        t.push(0, state(0.0, 0.0, 1.0));
        assert!(t.displacement_velocity(8).is_none());
        assert!(t.lsq_velocity(15).is_none());
        assert!(t.mean_reported_speed(8).is_none());
    }
}

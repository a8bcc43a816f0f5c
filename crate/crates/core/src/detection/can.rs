//! Timing-based CAN intrusion detection: a robust per-id baseline of
//! repetition periods learned from attack-free traffic, then streaming
//! detection of priority floods and message injection.
//!
//! Payload data modification is deliberately not detected here; it leaves no
//! timing signature.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canbus::CanFrame;

use super::{Anomaly, DetectionReport, Detector, Offender};

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum CanDetectError {
    /// Not enough training frames for an id seen in the window.
    #[error("insufficient data for id {id:#05x}: {have} frames, need {need}")]
    InsufficientData { id: u16, have: usize, need: usize },
    /// The training window contained no frames at all.
    #[error("empty training window")]
    EmptyTraining,
}

/// Robust period statistics for one id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdStats {
    pub median_period_ms: f64,
    pub mad_ms: f64,
    pub frames: usize,
}

/// Per-id baseline learned from an attack-free window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BaselineModel {
    pub per_id: BTreeMap<u16, IdStats>,
}

impl BaselineModel {
    pub fn knows(&self, id: u16) -> bool {
        self.per_id.contains_key(&id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanDetectConfig {
    /// Minimum training frames per id.
    pub min_train_frames: usize,
    /// Sliding window for flood occupancy, ms.
    pub dos_window_ms: f64,
    /// Occupancy share above which an unknown or highest-priority id is a
    /// flood.
    pub dos_share: f64,
    /// Minimum frames in the flood window before shares mean anything.
    pub dos_min_frames: usize,
    /// Sliding window for per-id inter-arrival statistics, ms.
    pub injection_window_ms: f64,
    /// Injection fires when the windowed median drops below this fraction of
    /// the baseline median.
    pub injection_ratio: f64,
    /// Or below `baseline - k * MAD`.
    pub injection_mad_k: f64,
    /// Minimum intervals in the window before the median is trusted.
    pub min_intervals: usize,
    /// Holdoff between repeated reports for one (id, anomaly), ms.
    pub report_holdoff_ms: f64,
}

impl Default for CanDetectConfig {
    fn default() -> Self {
        Self {
            min_train_frames: 100,
            dos_window_ms: 100.0,
            dos_share: 0.3,
            dos_min_frames: 10,
            injection_window_ms: 1000.0,
            injection_ratio: 0.6,
            injection_mad_k: 5.0,
            min_intervals: 8,
            report_holdoff_ms: 1000.0,
        }
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Learns per-id robust period statistics from an attack-free window.
pub fn learn_baseline(
    frames: &[CanFrame],
    cfg: &CanDetectConfig,
) -> Result<BaselineModel, CanDetectError> {
    if frames.is_empty() {
        return Err(CanDetectError::EmptyTraining);
    }
    let mut arrivals: BTreeMap<u16, Vec<f64>> = BTreeMap::new();
    for f in frames {
        arrivals.entry(f.id).or_default().push(f.timestamp_ms);
    }
    let mut model = BaselineModel::default();
    for (id, times) in arrivals {
        if times.len() < cfg.min_train_frames {
            return Err(CanDetectError::InsufficientData {
                id,
                have: times.len(),
                need: cfg.min_train_frames,
            });
        }
        let mut periods: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        periods.sort_by(f64::total_cmp);
        let med = median(&periods);
        let mut devs: Vec<f64> = periods.iter().map(|p| (p - med).abs()).collect();
        devs.sort_by(f64::total_cmp);
        let mad = median(&devs);
        model.per_id.insert(id, IdStats { median_period_ms: med, mad_ms: mad, frames: times.len() });
    }
    Ok(model)
}

fn frame_digest(f: &CanFrame) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(f.timestamp_ms.to_le_bytes());
    h.update(f.id.to_le_bytes());
    h.update(&f.payload);
    h.finalize().into()
}

/// Streaming detector over a trained baseline.
#[derive(Debug, Clone)]
pub struct CanMonitor {
    model: BaselineModel,
    cfg: CanDetectConfig,
    dos_window: VecDeque<(f64, u16)>,
    dos_counts: BTreeMap<u16, usize>,
    per_id: BTreeMap<u16, VecDeque<f64>>,
    last_report: BTreeMap<(u16, Anomaly), f64>,
}

impl CanMonitor {
    pub fn new(model: BaselineModel, cfg: CanDetectConfig) -> Self {
        Self {
            model,
            cfg,
            dos_window: VecDeque::new(),
            dos_counts: BTreeMap::new(),
            per_id: BTreeMap::new(),
            last_report: BTreeMap::new(),
        }
    }

    pub fn model(&self) -> &BaselineModel {
        &self.model
    }

    fn rate_limited(&mut self, id: u16, anomaly: Anomaly, now: f64) -> bool {
        match self.last_report.get(&(id, anomaly)) {
            Some(&t) if now - t < self.cfg.report_holdoff_ms => true,
            _ => {
                self.last_report.insert((id, anomaly), now);
                false
            }
        }
    }

    /// Feeds one frame in arrival order; returns any reports it triggers.
    /// `sim_time_ms` stamps the reports.
    pub fn feed(&mut self, frame: &CanFrame, sim_time_ms: u64) -> Vec<DetectionReport> {
        let now = frame.timestamp_ms;
        let mut reports = Vec::new();

        // Flood detection over the trailing occupancy window.
        self.dos_window.push_back((now, frame.id));
        *self.dos_counts.entry(frame.id).or_insert(0) += 1;
        while let Some(&(t, id)) = self.dos_window.front() {
            if now - t > self.cfg.dos_window_ms {
                self.dos_window.pop_front();
                if let Some(n) = self.dos_counts.get_mut(&id) {
                    *n = n.saturating_sub(1);
                }
            } else {
                break;
            }
        }
        if self.dos_window.len() >= self.cfg.dos_min_frames {
            let suspect = frame.id == 0 || !self.model.knows(frame.id);
            if suspect {
                let count = self.dos_counts.get(&frame.id).copied().unwrap_or(0);
                let share = count as f64 / self.dos_window.len() as f64;
                if share > self.cfg.dos_share && !self.rate_limited(frame.id, Anomaly::CanDos, now)
                {
                    reports.push(DetectionReport {
                        detector: Detector::CanTiming,
                        anomaly: Anomaly::CanDos,
                        offender: Offender::CanId(frame.id),
                        evidence: vec![frame_digest(frame)],
                        tracks: None,
                        source: None,
                        ttc_ms: None,
                        sim_time_ms,
                    });
                }
            }
        }

        // Injection detection on the per-id inter-arrival median.
        if let Some(stats) = self.model.per_id.get(&frame.id).copied() {
            let q = self.per_id.entry(frame.id).or_default();
            q.push_back(now);
            while let Some(&t) = q.front() {
                if now - t > self.cfg.injection_window_ms {
                    q.pop_front();
                } else {
                    break;
                }
            }
            if q.len() >= self.cfg.min_intervals + 1 {
                let mut periods: Vec<f64> =
                    q.iter().zip(q.iter().skip(1)).map(|(a, b)| b - a).collect();
                periods.sort_by(f64::total_cmp);
                let med = median(&periods);
                let floor = (stats.median_period_ms * self.cfg.injection_ratio)
                    .max(stats.median_period_ms - self.cfg.injection_mad_k * stats.mad_ms);
                if med < floor && !self.rate_limited(frame.id, Anomaly::CanInjection, now) {
                    reports.push(DetectionReport {
                        detector: Detector::CanTiming,
                        anomaly: Anomaly::CanInjection,
                        offender: Offender::CanId(frame.id),
                        evidence: vec![frame_digest(frame)],
                        tracks: None,
                        source: None,
                        ttc_ms: None,
                        sim_time_ms,
                    });
                }
            }
        }

        reports
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canbus::{generate_traffic, sort_frames, CanSchedule, PayloadKind, ScheduleEntry};

    fn entry(id: u16, period: f64, jitter: f64) -> ScheduleEntry {
        ScheduleEntry {
            id,
            period_ms: period,
            jitter_ms: jitter,
            payload: PayloadKind::Counter,
            payload_len: 8,
        }
    }

    fn schedule() -> CanSchedule {
        CanSchedule {
            entries: vec![
                entry(0x100, 10.0, 1.0),
                entry(0x200, 20.0, 2.0),
                entry(0x300, 50.0, 5.0),
            ],
        }
    }

    #[test]
    fn baseline_recovers_generator_periods() {
        let frames = generate_traffic(&schedule(), 10_000.0, 1).unwrap();
        let model = learn_baseline(&frames, &CanDetectConfig::default()).unwrap();
        let s = model.per_id[&0x100];
        assert!((s.median_period_ms - 10.0).abs() < 0.5, "median {}", s.median_period_ms);
        assert!(s.mad_ms <= 1.5, "mad {}", s.mad_ms);
        assert!((model.per_id[&0x300].median_period_ms - 50.0).abs() < 2.0);
    }

    #[test]
    fn jittered_slow_stream_median_is_period() {
        let sched = CanSchedule { entries: vec![entry(0x400, 100.0, 10.0)] };
        let frames = generate_traffic(&sched, 60_000.0, 2).unwrap();
        let model = learn_baseline(&frames, &CanDetectConfig::default()).unwrap();
        assert!((model.per_id[&0x400].median_period_ms - 100.0).abs() < 5.0);
    }

    #[test]
    fn short_training_is_insufficient() {
        let sched = CanSchedule { entries: vec![entry(0x100, 10.0, 0.0)] };
        // 50 frames only.
        let frames = generate_traffic(&sched, 500.0, 1).unwrap();
        assert_eq!(
            learn_baseline(&frames, &CanDetectConfig::default()),
            Err(CanDetectError::InsufficientData { id: 0x100, have: 50, need: 100 })
        );
    }

    fn train_and_monitor(seed: u64) -> (CanMonitor, Vec<CanFrame>) {
        let clean = generate_traffic(&schedule(), 60_000.0, seed).unwrap();
        let model = learn_baseline(&clean, &CanDetectConfig::default()).unwrap();
        (CanMonitor::new(model, CanDetectConfig::default()), clean)
    }

    #[test]
    fn clean_replay_raises_nothing() {
        let (mut monitor, clean) = train_and_monitor(3);
        let mut reports = 0;
        for f in &clean {
            reports += monitor.feed(f, f.timestamp_ms as u64).len();
        }
        assert_eq!(reports, 0);
    }

    #[test]
    fn flood_of_highest_priority_detected_within_a_window() {
        let (mut monitor, clean) = train_and_monitor(4);
        let onset = 30_000.0;
        let mut frames = clean;
        // Flood at 10x the fastest nominal rate: 1 ms period.
        let mut t = onset;
        while t < 31_000.0 {
            frames.push(CanFrame::new(0x000, vec![0; 8], t).unwrap());
            t += 1.0;
        }
        sort_frames(&mut frames);
        let mut first = None;
        for f in &frames {
            for r in monitor.feed(f, f.timestamp_ms as u64) {
                if r.anomaly == Anomaly::CanDos && first.is_none() {
                    first = Some(f.timestamp_ms);
                }
            }
        }
        let first = first.expect("flood detected");
        assert!(first - onset <= 1000.0, "latency {} ms", first - onset);
    }

    #[test]
    fn equal_rate_injection_halves_median_and_fires() {
        let (mut monitor, clean) = train_and_monitor(5);
        let onset = 30_000.0;
        let mut frames = clean;
        // Interleave one extra 0x100 frame per nominal period, offset by a
        // half period: the merged median inter-arrival drops to ~5 ms.
        let mut t = onset + 5.0;
        while t < 40_000.0 {
            frames.push(CanFrame::new(0x100, vec![0xAA; 8], t).unwrap());
            t += 10.0;
        }
        sort_frames(&mut frames);
        let mut first = None;
        for f in &frames {
            for r in monitor.feed(f, f.timestamp_ms as u64) {
                if r.anomaly == Anomaly::CanInjection && first.is_none() {
                    first = Some(f.timestamp_ms);
                }
            }
        }
        let first = first.expect("injection detected");
        assert!(first - onset <= 1000.0, "latency {} ms", first - onset);
    }

    #[test]
    fn data_modification_leaves_timing_silent() {
        // Rewriting payloads in place changes no timestamps: the timing
        // detector must stay quiet, by design.
        let (mut monitor, mut frames) = train_and_monitor(6);
        for f in frames.iter_mut().filter(|f| f.id == 0x200) {
            f.payload = vec![0xFF; 8];
        }
        let mut reports = 0;
        for f in &frames {
            reports += monitor.feed(f, f.timestamp_ms as u64).len();
        }
        assert_eq!(reports, 0);
    }

    #[test]
    fn reports_are_rate_limited() {
        let (mut monitor, clean) = train_and_monitor(7);
        let mut frames = clean;
        let mut t = 30_000.0;
        while t < 33_000.0 {
            frames.push(CanFrame::new(0x000, vec![0; 8], t).unwrap());
            t += 1.0;
        }
        sort_frames(&mut frames);
        let mut dos_reports = 0;
        for f in &frames {
            dos_reports += monitor
                .feed(f, f.timestamp_ms as u64)
                .iter()
                .filter(|r| r.anomaly == Anomaly::CanDos)
                .count();
        }
        // 3 s of flood with a 1 s holdoff: at most ~4 reports, not hundreds.
        assert!(dos_reports >= 1 && dos_reports <= 4, "{dos_reports} reports");
    }
}

//! Constant-velocity Kalman filter over pedestrian object data and the
//! normalized-innovation-squared gate on its per-source residual streams.
//!
//! The state is `(px, py, vx, vy)` in SI units. The measurement model is a
//! position selector, which makes the filter linear in this configuration;
//! the structure still follows the extended form so nonlinear measurement
//! models can slot in later.

use nalgebra::{Matrix2, Matrix4, Matrix2x4, Vector2, Vector4};
use thiserror::Error;

use super::{GateConfig, MeasurementSource};

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum EkfError {
    /// Covariance lost symmetry or positive definiteness beyond repair
    /// tolerance.
    #[error("covariance not positive definite")]
    NonPositiveDefinite,
    /// Innovation covariance is singular at tolerance 1e-12.
    #[error("singular innovation covariance")]
    SingularInnovation,
    /// Prediction asked to run backwards in time.
    #[error("prediction target {to_ms} before filter time {at_ms}")]
    TimeReversal { to_ms: u64, at_ms: u64 },
}

/// Filter state: mean, covariance, and the time they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub x: Vector4<f64>,
    pub p: Matrix4<f64>,
    pub last_time_ms: u64,
}

const SYM_TOL: f64 = 1e-9;

impl EkfState {
    /// Initializes from a first position measurement with variance `r` and a
    /// loose velocity prior.
    pub fn from_measurement(z: Vector2<f64>, r: f64, time_ms: u64) -> Self {
        let mut p = Matrix4::zeros();
        p[(0, 0)] = r;
        p[(1, 1)] = r;
        p[(2, 2)] = 25.0;
        p[(3, 3)] = 25.0;
        Self { x: Vector4::new(z.x, z.y, 0.0, 0.0), p, last_time_ms: time_ms }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x[0], self.x[1])
    }

    pub fn velocity(&self) -> Vector2<f64> {
        Vector2::new(self.x[2], self.x[3])
    }

    fn check_covariance(&self) -> Result<(), EkfError> {
        for i in 0..4 {
            for j in 0..4 {
                if (self.p[(i, j)] - self.p[(j, i)]).abs() > SYM_TOL {
                    return Err(EkfError::NonPositiveDefinite);
                }
            }
        }
        if self.p.clone_owned().cholesky().is_none() {
            return Err(EkfError::NonPositiveDefinite);
        }
        Ok(())
    }

    /// Propagates to `to_time_ms` under the constant-velocity model with
    /// white-noise-acceleration process noise of density `q` (m^2/s^3).
    pub fn predict(&self, to_time_ms: u64, q: f64) -> Result<EkfState, EkfError> {
        if to_time_ms < self.last_time_ms {
            return Err(EkfError::TimeReversal { to_ms: to_time_ms, at_ms: self.last_time_ms });
        }
        let dt = (to_time_ms - self.last_time_ms) as f64 / 1000.0;
        if dt == 0.0 {
            return Ok(self.clone());
        }
        let mut f = Matrix4::identity();
        f[(0, 2)] = dt;
        f[(1, 3)] = dt;

        let dt2 = dt * dt;
        let dt3 = dt2 * dt;
        let mut qm = Matrix4::zeros();
        for axis in 0..2 {
            let (pi, vi) = (axis, axis + 2);
            qm[(pi, pi)] = q * dt3 / 3.0;
            qm[(pi, vi)] = q * dt2 / 2.0;
            qm[(vi, pi)] = q * dt2 / 2.0;
            qm[(vi, vi)] = q * dt;
        }

        let x = f * self.x;
        let p = f * self.p * f.transpose() + qm;
        let out = EkfState { x, p: symmetrize(p), last_time_ms: to_time_ms };
        out.check_covariance()?;
        Ok(out)
    }

    /// Normalized innovation squared of a measurement against the current
    /// prediction, without committing an update. Used as a validation gate:
    /// measurements that fail it are reported and excluded from the fused
    /// state so a malicious stream cannot drag the filter.
    pub fn nis(&self, z: Vector2<f64>, r: Matrix2<f64>) -> Result<f64, EkfError> {
        let h = Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        let y = z - h * self.x;
        let s = h * self.p * h.transpose() + r;
        if s.determinant().abs() < 1e-12 {
            return Err(EkfError::SingularInnovation);
        }
        let s_inv = s.try_inverse().ok_or(EkfError::SingularInnovation)?;
        Ok((y.transpose() * s_inv * y)[(0, 0)])
    }

    /// Standard measurement update with a position-selector observation
    /// matrix. Returns the posterior state and the normalized innovation
    /// squared of this measurement.
    pub fn update(&self, z: Vector2<f64>, r: Matrix2<f64>) -> Result<(EkfState, f64), EkfError> {
        let h = Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        let y = z - h * self.x;
        let s = h * self.p * h.transpose() + r;
        let det = s.determinant();
        if det.abs() < 1e-12 {
            return Err(EkfError::SingularInnovation);
        }
        let s_inv = s.try_inverse().ok_or(EkfError::SingularInnovation)?;
        let nis = (y.transpose() * s_inv * y)[(0, 0)];
        let k = self.p * h.transpose() * s_inv;
        let x = self.x + k * y;
        let p = (Matrix4::identity() - k * h) * self.p;
        let out = EkfState { x, p: symmetrize(p), last_time_ms: self.last_time_ms };
        out.check_covariance()?;
        Ok((out, nis))
    }
}

fn symmetrize(p: Matrix4<f64>) -> Matrix4<f64> {
    (p + p.transpose()) * 0.5
}

/// Tracks per-source NIS exceedance runs and fires after `window_k`
/// consecutive hits from the same source.
#[derive(Debug, Clone, Default)]
pub struct NisGate {
    runs: std::collections::BTreeMap<MeasurementSource, u32>,
    updates_seen: u32,
}

impl NisGate {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds one NIS sample; returns the source once its run reaches the
    /// configured window.
    pub fn feed(
        &mut self,
        source: MeasurementSource,
        nis: f64,
        cfg: &GateConfig,
    ) -> Option<MeasurementSource> {
        self.updates_seen += 1;
        if self.updates_seen <= cfg.warmup_updates {
            self.runs.insert(source, 0);
            return None;
        }
        let run = self.runs.entry(source).or_insert(0);
        if nis > cfg.nis_threshold {
            *run += 1;
            if *run == cfg.window_k {
                return Some(source);
            }
        } else {
            *run = 0;
        }
        None
    }

    /// Restarts the exceedance run after a report so the same condition does
    /// not refire every step.
    pub fn rearm(&mut self, source: MeasurementSource) {
        self.runs.insert(source, 0);
    }
}

//! Schedules for the selected-mass fraction `rho`.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `rho0 + (1 - rho0) exp(-5 (1 - t/T)^2)`.
    Sigmoid,
    /// `rho0 + (1 - rho0) t/T`.
    Linear,
    /// Constant `rho0`.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub rho0: f64,
    /// Usually supplied by the training loop rather than the config.
    #[serde(default = "one")]
    pub total_steps: usize,
}

fn one() -> usize {
    1
}

impl Schedule {
    pub fn new(kind: ScheduleKind, rho0: f64, total_steps: usize) -> Result<Self> {
        let s = Self {
            kind,
            rho0,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho0) {
            return Err(arg_err(format!("rho0 must lie in [0, 1], got {}", self.rho0)));
        }
        if self.total_steps == 0 {
            return Err(arg_err("total_steps must be >= 1"));
        }
        Ok(())
    }

    pub fn with_total_steps(self, total_steps: usize) -> Result<Self> {
        Self::new(self.kind, self.rho0, total_steps)
    }

    /// `rho` at step `t` in `0..=T`.
    pub fn rho_at(&self, t: usize) -> Result<f64> {
        self.validate()?;
        let big_t = self.total_steps;
        if t > big_t {
            return Err(arg_err(format!("step {t} beyond total_steps {big_t}")));
        }
        // r0 + (1 - r0) can round away from 1, so the end of a ramp is pinned.
        if t == big_t && self.kind != ScheduleKind::Fixed {
            return Ok(1.0);
        }
        let frac = t as f64 / big_t as f64;
        let r0 = self.rho0;
        Ok(match self.kind {
            ScheduleKind::Sigmoid => r0 + (1.0 - r0) * (-5.0 * (1.0 - frac).powi(2)).exp(),
            ScheduleKind::Linear => r0 + (1.0 - r0) * frac,
            ScheduleKind::Fixed => r0,
        })
    }
}

/// Default training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub lambda2: f64,
    pub epsilon: f64,
    pub rho0: f64,
    pub knn_k: usize,
    pub lambda1_0: f64,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub buffer_size: usize,
    pub batch_size: usize,
}

pub fn default_hyperparameters() -> Hyperparameters {
    Hyperparameters {
        lambda2: 1.0,
        epsilon: 0.1,
        rho0: 0.1,
        knn_k: 20,
        lambda1_0: 1000.0,
        inner_tol: 1e-6,
        inner_max_iter: 1000,
        buffer_size: 5120,
        batch_size: 512,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_endpoints() {
        let s = Schedule::new(ScheduleKind::Sigmoid, 0.1, 100).unwrap();
        assert!((s.rho_at(0).unwrap() - 0.106_064).abs() < 1e-6);
        assert_eq!(s.rho_at(100).unwrap(), 1.0);
        assert!(s.rho_at(101).is_err());
    }

    #[test]
    fn linear_and_fixed() {
        let l = Schedule::new(ScheduleKind::Linear, 0.2, 4).unwrap();
        assert_eq!(l.rho_at(0).unwrap(), 0.2);
        assert!((l.rho_at(2).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(l.rho_at(4).unwrap(), 1.0);
        let f = Schedule::new(ScheduleKind::Fixed, 0.2, 7).unwrap();
        assert!((0..=7).all(|t| f.rho_at(t).unwrap() == 0.2));
    }

    #[test]
    fn monotone() {
        for kind in [ScheduleKind::Sigmoid, ScheduleKind::Linear] {
            let s = Schedule::new(kind, 0.05, 50).unwrap();
            let v: Vec<f64> = (0..=50).map(|t| s.rho_at(t).unwrap()).collect();
            assert!(v.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn validation_and_config() {
        assert!(Schedule::new(ScheduleKind::Fixed, 1.5, 3).is_err());
        assert!(Schedule::new(ScheduleKind::Fixed, 0.5, 0).is_err());
        let s: Schedule = serde_json::from_str(r#"{"kind":"sigmoid","rho0":0.1}"#).unwrap();
        assert_eq!(s.kind, ScheduleKind::Sigmoid);
        assert!(serde_json::from_str::<Schedule>(r#"{"kind":"sigmoid","rho0":0.1,"x":1}"#).is_err());
    }

    #[test]
    fn defaults() {
        let h = default_hyperparameters();
        assert_eq!((h.epsilon, h.knn_k, h.lambda1_0, h.lambda2), (0.1, 20, 1000.0, 1.0));
        assert_eq!((h.buffer_size, h.batch_size), (5120, 512));
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

/// Step-decay schedule: `base * factor^floor((it - start) / interval)`,
/// held at `base` before `start` and clamped below at `floor`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base: f64,
    #[serde(default = "one")]
    pub factor: f64,
    #[serde(default = "one_usize")]
    pub interval: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
    #[serde(default)]
    pub start: usize,
}

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Self {
            base: value,
            factor: 1.0,
            interval: 1,
            floor: None,
            start: 0,
        }
    }

    pub fn step_decay(base: f64, factor: f64, interval: usize) -> Self {
        Self {
            base,
            factor,
            interval,
            floor: None,
            start: 0,
        }
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = Some(floor);
        self
    }

    pub fn starting_at(mut self, start: usize) -> Self {
        self.start = start;
        self
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::config(field, msg));
        if !(self.base >= 0.0) || !self.base.is_finite() {
            return bad(format!("base must be finite and non-negative, got {}", self.base));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return bad(format!("factor must lie in (0, 1], got {}", self.factor));
        }
        if self.interval == 0 {
            return bad("interval must be at least 1".into());
        }
        if let Some(f) = self.floor {
            if !(f >= 0.0) {
                return bad(format!("floor must be non-negative, got {f}"));
            }
        }
        Ok(())
    }

    pub fn value(&self, iteration: usize) -> f64 {
        let k = iteration.saturating_sub(self.start) / self.interval;
        let v = self.base * self.factor.powi(k.min(i32::MAX as usize) as i32);
        match self.floor {
            Some(f) => v.max(f),
            None => v,
        }
    }
}

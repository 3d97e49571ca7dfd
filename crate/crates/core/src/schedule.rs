//! Cosine schedules with per-period amplitude decay.

use serde::{Deserialize, Serialize};

/// Piecewise cosine schedule. Over `total_steps` the unit interval is split
/// into `periods` equal windows; within window `p` the value traces one full
/// cosine arc: it starts at `lo + (hi - lo) * decay^p`, dips to `lo` at the
/// window midpoint, and returns to the decayed high point at the window end.
/// Each successive window shrinks the amplitude by another factor of `decay`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lo: f64,
    pub hi: f64,
    pub decay: f64,
    pub periods: u32,
    pub total_steps: u64,
}

impl CosineSchedule {
    /// Schedule value at a step. Clamped to the final value past
    /// `total_steps`.
    pub fn value(&self, step: u64) -> f64 {
        if self.total_steps == 0 || self.periods == 0 || self.hi == self.lo {
            return self.lo;
        }
        let t = (step.min(self.total_steps) as f64) / (self.total_steps as f64);
        let scaled = t * self.periods as f64;
        let period = (scaled.floor() as u32).min(self.periods - 1);
        let frac = scaled - period as f64;
        let amplitude = (self.hi - self.lo) * self.decay.powi(period as i32);
        let phase = 2.0 * std::f64::consts::PI * frac;
        self.lo + amplitude * 0.5 * (1.0 + phase.cos())
    }

    /// Constant schedule pinned at `v`.
    pub fn constant(v: f64) -> Self {
        Self {
            lo: v,
            hi: v,
            decay: 1.0,
            periods: 1,
            total_steps: 1,
        }
    }
}

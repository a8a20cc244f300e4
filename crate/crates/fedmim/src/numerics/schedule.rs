//! Learning-rate schedule: linear warm-up into a cosine decay.
//!
//! The schedule is indexed by a global step counter that the federation loop
//! advances once per local epoch, so a client resuming at round `t` sees the
//! same learning rate no matter which machine it runs on.

use crate::error::{ensure, Result};
use crate::numerics::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule<F: Real> {
    /// Peak learning rate, reached at the end of the warm-up.
    pub base: F,
    /// Value the cosine decays towards.
    pub floor: F,
    /// Steps of linear ramp from zero to `base`.
    pub warmup: u64,
    /// Total steps; the cosine spans `warmup..total`.
    pub total: u64,
}

impl<F: Real> Schedule<F> {
    pub fn new(base: F, floor: F, warmup: u64, total: u64) -> Result<Self> {
        ensure!(total >= 1, "schedule must cover at least one step");
        ensure!(
            warmup <= total,
            "warm-up ({warmup} steps) exceeds the schedule length ({total})"
        );
        ensure!(
            base >= floor && floor >= F::zero(),
            "need base >= floor >= 0, got base {base} floor {floor}"
        );
        Ok(Schedule {
            base,
            floor,
            warmup,
            total,
        })
    }

    /// Learning rate for step `t` (zero-based). `t` past the end is a
    /// programming error, not a clamp.
    pub fn at(&self, t: u64) -> Result<F> {
        ensure!(
            t < self.total,
            "step {t} is outside the schedule of {} steps",
            self.total
        );
        if t < self.warmup {
            let frac = F::from_f64(t as f64) / F::from_f64(self.warmup as f64);
            return Ok(self.base * frac);
        }
        let span = (self.total - self.warmup) as f64;
        let phase = (t - self.warmup) as f64 / span;
        let cos = F::from_f64(0.5 * (1.0 + (std::f64::consts::PI * phase).cos()));
        Ok(self.floor + (self.base - self.floor) * cos)
    }
}

/// Free-function form of [`Schedule::at`].
pub fn schedule_at<F: Real>(schedule: &Schedule<F>, t: u64) -> Result<F> {
    schedule.at(t)
}

use serde::{Deserialize, Serialize};

use crate::sched::Iteration;

/// Per-iteration batch budget: `beta_t = steps_t * per_step_batch` with
/// `steps_{t+1} = floor(growth * steps_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSchedule {
    pub initial_steps: u64,
    pub per_step_batch: u64,
    /// Applied as an exact ratio after rounding to six decimals.
    pub growth: f64,
}

impl Default for BatchSchedule {
    fn default() -> Self {
        Self {
            initial_steps: 40,
            per_step_batch: 8,
            growth: 1.2,
        }
    }
}

const GROWTH_SCALE: u128 = 1_000_000;

impl BatchSchedule {
    fn growth_ratio(&self) -> u128 {
        (self.growth * GROWTH_SCALE as f64).round().max(0.0) as u128
    }

    /// Gradient steps at iteration `t` (1-based).
    pub fn steps(&self, t: Iteration) -> u64 {
        let ratio = self.growth_ratio();
        let mut steps = u128::from(self.initial_steps);
        for _ in 1..t.max(1) {
            steps = (steps * ratio / GROWTH_SCALE).min(u128::from(u64::MAX));
        }
        steps as u64
    }

    /// Batch budget at iteration `t`.
    pub fn beta(&self, t: Iteration) -> u64 {
        self.steps(t).saturating_mul(self.per_step_batch)
    }
}

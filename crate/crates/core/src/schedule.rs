use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear decay from `start` to `end` over the first `fraction` of
/// `total_steps`, flat afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub fraction: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self { start: 1.0, end: 0.05, fraction: 0.8 }
    }
}

impl EpsilonSchedule {
    pub fn constant(eps: f64) -> Self {
        Self { start: eps, end: eps, fraction: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.start) || !unit.contains(&self.end) || !unit.contains(&self.fraction) {
            return Err(Error::InvalidConfig("epsilon schedule values must lie in [0, 1]".into()));
        }
        if self.end > self.start {
            return Err(Error::InvalidConfig("epsilon must not increase".into()));
        }
        Ok(())
    }

    pub fn value(&self, step: u64, total_steps: u64) -> f64 {
        let horizon = self.fraction * total_steps as f64;
        if horizon <= 0.0 || step as f64 >= horizon {
            return self.end;
        }
        let frac = step as f64 / horizon;
        (self.start + (self.end - self.start) * frac).clamp(self.end, self.start)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.value(0, 100), 1.0);
        assert!((s.value(40, 100) - 0.525).abs() < 1e-12);
        assert_eq!(s.value(80, 100), 0.05);
        assert_eq!(s.value(99, 100), 0.05);
        assert_eq!(EpsilonSchedule::constant(0.3).value(0, 10), 0.3);
        assert!(EpsilonSchedule { start: 0.1, end: 0.5, fraction: 0.5 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn monotone_and_bounded(total in 1u64..5000, a in 0u64..6000, b in 0u64..6000) {
            let s = EpsilonSchedule::default();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(s.value(hi, total) <= s.value(lo, total));
            prop_assert!((0.0..=1.0).contains(&s.value(a, total)));
        }
    }
}

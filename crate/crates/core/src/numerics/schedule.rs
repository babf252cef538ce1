use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_POLY_POWER: f64 = 0.9;

/// Polynomial decay `lr_init · (1 − step/T)^power`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_init: f64,
    pub total_steps: u64,
    pub power: f64,
}

impl LrSchedule {
    pub fn new(lr_init: f64, total_steps: u64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Domain("schedule needs at least one step".into()));
        }
        if !(lr_init >= 0.0 && lr_init.is_finite()) {
            return Err(Error::Domain(format!("lr_init must be ≥ 0, got {lr_init}")));
        }
        Ok(Self {
            lr_init,
            total_steps,
            power: DEFAULT_POLY_POWER,
        })
    }

    pub fn rate(&self, step: u64) -> f64 {
        poly_lr(step, self)
    }
}

/// Rate at `step`; steps past the end clamp to zero.
pub fn poly_lr(step: u64, schedule: &LrSchedule) -> f64 {
    if step >= schedule.total_steps {
        return 0.0;
    }
    let frac = 1.0 - step as f64 / schedule.total_steps as f64;
    schedule.lr_init * frac.powf(schedule.power)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints() {
        let s = LrSchedule::new(4e-3, 100).unwrap();
        assert_eq!(poly_lr(0, &s), 4e-3);
        assert_eq!(poly_lr(100, &s), 0.0);
        assert_eq!(poly_lr(250, &s), 0.0);
    }

    #[test]
    fn halfway_value() {
        let s = LrSchedule::new(4e-3, 1000).unwrap();
        let expected = 4e-3 * 0.5f64.powf(0.9);
        assert!((poly_lr(500, &s) - expected).abs() < 1e-15);
        assert!((poly_lr(500, &s) - 2.1435e-3).abs() < 1e-7);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(LrSchedule::new(1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn strictly_decreasing(t in 2u64..5000, lr in 1e-5f64..1.0) {
            let s = LrSchedule::new(lr, t).unwrap();
            let mut prev = poly_lr(0, &s);
            for step in 1..=t {
                let r = poly_lr(step, &s);
                prop_assert!(r < prev);
                prev = r;
            }
        }
    }
}

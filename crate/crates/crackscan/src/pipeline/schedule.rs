//! Learning-rate schedules for the two training stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed-form learning-rate schedule shapes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum LrSchedule {
    /// `initial * factor^floor(epoch / period)`.
    Step { initial: f64, factor: f64, period: usize },
    /// `high` before `switch_epoch`, `low` from it on.
    TwoPhase { high: f64, low: f64, switch_epoch: usize },
    Constant { lr: f64 },
}

impl LrSchedule {
    /// Stage-one default: 0.005 decayed by 0.1 every ten epochs.
    pub fn classifier_default() -> Self {
        LrSchedule::Step { initial: 0.005, factor: 0.1, period: 10 }
    }

    /// Stage-two default: 0.001 for the first 50 epochs, 0.0001 after.
    pub fn segmenter_default() -> Self {
        LrSchedule::TwoPhase { high: 0.001, low: 0.0001, switch_epoch: 50 }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Step { initial, factor, period } => {
                initial * factor.powi((epoch / period) as i32)
            }
            LrSchedule::TwoPhase { high, low, switch_epoch } => {
                if epoch < switch_epoch {
                    high
                } else {
                    low
                }
            }
            LrSchedule::Constant { lr } => lr,
        }
    }
}

/// Classifier learning rate for a 100-epoch run:
/// `0.005 * 0.1^floor(epoch / 10)` for epochs 0..100.
pub fn lr_schedule_classifier(epoch: usize) -> Result<f64> {
    if epoch >= 100 {
        return Err(Error::InvalidArgument(format!(
            "classifier schedule is defined for epochs 0..100, got {epoch}"
        )));
    }
    Ok(LrSchedule::classifier_default().at(epoch))
}

/// Segmenter learning rate for a 100-epoch run: 0.001 for the first 50
/// epochs, 0.0001 for the last 50.
pub fn lr_schedule_segmenter(epoch: usize) -> Result<f64> {
    if epoch >= 100 {
        return Err(Error::InvalidArgument(format!(
            "segmenter schedule is defined for epochs 0..100, got {epoch}"
        )));
    }
    Ok(LrSchedule::segmenter_default().at(epoch))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-15;

    #[test]
    fn classifier_schedule_decay_steps() {
        assert!((lr_schedule_classifier(0).unwrap() - 0.005).abs() < TOL);
        assert!((lr_schedule_classifier(9).unwrap() - 0.005).abs() < TOL);
        assert!((lr_schedule_classifier(10).unwrap() - 0.0005).abs() < TOL);
        assert!((lr_schedule_classifier(25).unwrap() - 5e-5).abs() < TOL);
        assert!(lr_schedule_classifier(100).is_err());
    }

    #[test]
    fn segmenter_schedule_two_phases() {
        assert!((lr_schedule_segmenter(0).unwrap() - 0.001).abs() < TOL);
        assert!((lr_schedule_segmenter(49).unwrap() - 0.001).abs() < TOL);
        assert!((lr_schedule_segmenter(50).unwrap() - 0.0001).abs() < TOL);
        assert!((lr_schedule_segmenter(99).unwrap() - 0.0001).abs() < TOL);
        assert!(lr_schedule_segmenter(100).is_err());
    }
}

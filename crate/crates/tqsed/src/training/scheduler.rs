//! Reduce-on-plateau learning-rate schedule with a hard stop.
//!
//! An epoch "improves" when its metric is strictly better (lower) than the
//! best seen. When `patience` epochs pass without improvement the rate
//! halves and the counter resets; when the halving budget is already spent
//! and patience runs out again, training stops.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlateauConfig {
    pub patience: usize,
    pub max_halvings: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 10,
            max_halvings: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedulerState {
    pub initial_lr: f64,
    pub current_lr: f64,
    pub best_metric: Option<f64>,
    pub epochs_since_improvement: usize,
    pub halvings_done: usize,
}

impl LrSchedulerState {
    pub fn new(initial_lr: f64) -> Self {
        Self {
            initial_lr,
            current_lr: initial_lr,
            best_metric: None,
            epochs_since_improvement: 0,
            halvings_done: 0,
        }
    }

    /// `current_lr == initial_lr / 2^halvings_done` at every step.
    pub fn invariant_holds(&self) -> bool {
        let expected = self.initial_lr / f64::powi(2.0, self.halvings_done as i32);
        (self.current_lr - expected).abs() <= 1e-15 * expected.abs()
    }
}

/// Feeds one epoch metric in; returns `true` when training should stop.
pub fn scheduler_step(
    state: &mut LrSchedulerState,
    cfg: &PlateauConfig,
    epoch_metric: f64,
) -> Result<bool> {
    if !epoch_metric.is_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite epoch metric {epoch_metric}"
        )));
    }
    let improved = match state.best_metric {
        None => true,
        Some(best) => epoch_metric < best,
    };
    if improved {
        state.best_metric = Some(epoch_metric);
        state.epochs_since_improvement = 0;
        return Ok(false);
    }
    state.epochs_since_improvement += 1;
    if state.epochs_since_improvement >= cfg.patience {
        if state.halvings_done >= cfg.max_halvings {
            return Ok(true);
        }
        state.current_lr /= 2.0;
        state.halvings_done += 1;
        state.epochs_since_improvement = 0;
    }
    Ok(false)
}

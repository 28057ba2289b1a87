use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate policy driven by the raw and smoothed validation loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub initial_lr: f64,
    /// EMA coefficient: `ema ← α·ema + (1−α)·val`.
    pub ema_alpha: f64,
    /// Epochs during which the rate is never decayed.
    pub freeze_epochs: usize,
    /// Epochs without improvement in either signal that trigger a decay.
    pub patience: usize,
    pub decay_factor: f64,
    /// Consecutive decays without improvement that stop training.
    pub stop_after_decays: usize,
    pub max_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            initial_lr: 0.003,
            ema_alpha: 0.9,
            freeze_epochs: 150,
            patience: 30,
            decay_factor: 0.3,
            stop_after_decays: 3,
            max_epochs: 300,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("schedule.initial_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return bad("schedule.ema_alpha must lie in [0, 1)");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad("schedule.decay_factor must lie in (0, 1)");
        }
        if self.patience == 0 || self.stop_after_decays == 0 || self.max_epochs == 0 {
            return bad("schedule.patience, stop_after_decays and max_epochs must be positive");
        }
        Ok(())
    }
}

/// Schedule state after the last completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub lr: f64,
    pub val_loss: Option<f64>,
    pub ema_val_loss: Option<f64>,
    pub best_val_loss: f64,
    pub best_ema_val_loss: f64,
    pub epochs_since_improvement: usize,
    pub decays_without_improvement: usize,
    pub stopped: bool,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn new(config: &ScheduleConfig, rng_seed: u64) -> Self {
        TrainState {
            epoch: 0,
            lr: config.initial_lr,
            val_loss: None,
            ema_val_loss: None,
            best_val_loss: f64::INFINITY,
            best_ema_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            decays_without_improvement: 0,
            stopped: false,
            rng_seed,
        }
    }
}

/// What one schedule update decided.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepEvents {
    pub improved_val: bool,
    pub improved_ema: bool,
    pub decayed: bool,
    pub stop: bool,
}

/// Folds the validation loss of epoch `state.epoch + 1` into the state.
/// The returned `lr` applies to the following epoch.
pub fn lr_schedule_step(state: &TrainState, val_loss: f64, config: &ScheduleConfig) -> Result<(TrainState, StepEvents)> {
    let epoch = state.epoch + 1;
    if !val_loss.is_finite() {
        return Err(Error::NonFinite { epoch, value: val_loss });
    }
    let a = config.ema_alpha;
    let ema = match state.ema_val_loss {
        Some(prev) => a * prev + (1.0 - a) * val_loss,
        None => val_loss,
    };
    let mut next = state.clone();
    next.epoch = epoch;
    next.val_loss = Some(val_loss);
    next.ema_val_loss = Some(ema);

    let mut ev = StepEvents {
        improved_val: val_loss < state.best_val_loss,
        improved_ema: ema < state.best_ema_val_loss,
        ..Default::default()
    };
    if ev.improved_val {
        next.best_val_loss = val_loss;
    }
    if ev.improved_ema {
        next.best_ema_val_loss = ema;
    }
    if ev.improved_val || ev.improved_ema {
        next.epochs_since_improvement = 0;
        next.decays_without_improvement = 0;
    } else {
        next.epochs_since_improvement += 1;
        if epoch > config.freeze_epochs && next.epochs_since_improvement >= config.patience {
            next.lr *= config.decay_factor;
            next.epochs_since_improvement = 0;
            next.decays_without_improvement += 1;
            ev.decayed = true;
            ev.stop = next.decays_without_improvement >= config.stop_after_decays;
        }
    }
    next.stopped = ev.stop;
    Ok((next, ev))
}

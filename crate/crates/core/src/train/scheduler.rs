use crate::error::{Error, Result};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DECAY_FACTOR: f64 = 5.0;
pub const PATIENCE_DECAY: u32 = 3;
pub const PATIENCE_STOP: u32 = 10;

/// Plateau schedule over per-epoch validation metrics (lower is better).
///
/// A single stale-epoch counter drives both rules: the learning rate is
/// divided by `decay_factor` whenever the counter reaches a multiple of
/// `patience_decay`, and training stops when it reaches `patience_stop`.
#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerState {
    pub best_metric: f64,
    pub epochs_since_improvement: u32,
    pub lr: f64,
    pub stopped: bool,
    pub decay_factor: f64,
    pub patience_decay: u32,
    pub patience_stop: u32,
}

/// What one update decided.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SchedulerEvent {
    /// Strictly better than every previous metric; save a checkpoint.
    pub improved: bool,
    pub decayed: bool,
    pub stopped: bool,
}

impl Default for SchedulerState {
    fn default() -> Self {
        Self::new(DEFAULT_LEARNING_RATE)
    }
}

impl SchedulerState {
    pub fn new(lr: f64) -> Self {
        Self {
            best_metric: f64::INFINITY,
            epochs_since_improvement: 0,
            lr,
            stopped: false,
            decay_factor: DECAY_FACTOR,
            patience_decay: PATIENCE_DECAY,
            patience_stop: PATIENCE_STOP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::Config(format!(
                "decay factor must be positive, got {}",
                self.decay_factor
            )));
        }
        if self.patience_decay == 0 || self.patience_stop == 0 {
            return Err(Error::Config("patience values must be at least 1".into()));
        }
        Ok(())
    }

    pub fn update(&mut self, metric: f64) -> Result<SchedulerEvent> {
        if metric.is_nan() {
            return Err(Error::NonFinite("validation metric is NaN".into()));
        }
        if self.stopped {
            return Err(Error::InvalidArgument("scheduler already stopped training".into()));
        }
        let mut ev = SchedulerEvent {
            improved: false,
            decayed: false,
            stopped: false,
        };
        if metric < self.best_metric {
            self.best_metric = metric;
            self.epochs_since_improvement = 0;
            ev.improved = true;
            return Ok(ev);
        }
        self.epochs_since_improvement += 1;
        let n = self.epochs_since_improvement;
        if n >= self.patience_stop {
            self.stopped = true;
            ev.stopped = true;
        } else if n.is_multiple_of(self.patience_decay) {
            self.lr /= self.decay_factor;
            ev.decayed = true;
        }
        Ok(ev)
    }
}

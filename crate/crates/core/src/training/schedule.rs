//! Validation-plateau learning-rate schedule: halve the rate whenever the
//! validation loss has not improved on the best seen value for a fixed
//! number of consecutive epochs.

#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    best: Option<f64>,
    since_improvement: usize,
    pub patience: usize,
    pub factor: f64,
    /// Strict-improvement margin.
    pub min_delta: f64,
}

impl PlateauSchedule {
    pub fn new(patience: usize, factor: f64) -> PlateauSchedule {
        assert!(patience >= 1, "patience must be at least 1");
        PlateauSchedule { best: None, since_improvement: 0, patience, factor, min_delta: 1e-4 }
    }

    /// Record one epoch's validation loss; returns the learning rate to use
    /// next. A decay resets the patience window.
    pub fn update(&mut self, val_loss: f64, lr: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(best) => val_loss < best - self.min_delta,
        };
        if improved {
            self.best = Some(val_loss);
            self.since_improvement = 0;
            lr
        } else {
            self.since_improvement += 1;
            if self.since_improvement >= self.patience {
                self.since_improvement = 0;
                lr * self.factor
            } else {
                lr
            }
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn since_improvement(&self) -> usize {
        self.since_improvement
    }

    /// Rebuild schedule state from checkpointed values.
    pub fn restore(
        patience: usize,
        factor: f64,
        best: Option<f64>,
        since_improvement: usize,
    ) -> PlateauSchedule {
        PlateauSchedule { best, since_improvement, patience, factor, min_delta: 1e-4 }
    }
}

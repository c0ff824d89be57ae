use serde::{Deserialize, Serialize};

/// Multiplies the learning rate by `factor` once the monitored loss has gone
/// `patience` epochs without improving by more than `min_delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub min_delta: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64, min_delta: f64) -> Self {
        Self { lr, factor, patience, min_lr, min_delta, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Feeds one epoch's loss and returns the learning rate for the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                // products like 1e-5 * 0.1 land an ulp above the floor; snap them onto it
                let next = self.lr * self.factor;
                self.lr = if next <= self.min_lr * (1.0 + 1e-9) { self.min_lr } else { next };
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Signals a stop after `patience` consecutive epochs without improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    best_epoch: Option<usize>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { patience, min_delta, best: f64::INFINITY, best_epoch: None, bad_epochs: 0 }
    }

    /// Returns `(improved, stop)`.
    pub fn step(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            (true, false)
        } else {
            self.bad_epochs += 1;
            (false, self.bad_epochs >= self.patience)
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

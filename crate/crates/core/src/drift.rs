//! Loss-based task-switch detection: an exponentially weighted moving average of the batch loss
//! compared against `mean + 3·std` of a sliding window of recent raw batch losses.

use std::collections::VecDeque;

use crate::error::{Result, TameError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    /// Weight of the newest observation in the moving average.
    pub alpha: f64,
    /// Capacity of the raw-loss window (`W_th`).
    pub window_size: usize,
    /// Minimum number of stored losses before a threshold is available.
    pub min_fill: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            alpha: 0.2,
            window_size: 100,
            min_fill: 100,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TameError::config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.window_size < 2 {
            return Err(TameError::config("window_size must be >= 2"));
        }
        if self.min_fill < 2 || self.min_fill > self.window_size {
            return Err(TameError::config(format!(
                "min_fill must be in [2, {}], got {}",
                self.window_size, self.min_fill
            )));
        }
        Ok(())
    }
}

/// Exponentially smoothed loss; absent until the first observation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SmoothedLoss(Option<f64>);

impl SmoothedLoss {
    pub fn absent() -> Self {
        SmoothedLoss(None)
    }

    pub fn value(&self) -> Option<f64> {
        self.0
    }

    /// The value an update with `loss` would produce, without committing it.
    pub fn candidate(&self, loss: f64, alpha: f64) -> f64 {
        match self.0 {
            None => loss,
            Some(prev) => alpha * loss + (1.0 - alpha) * prev,
        }
    }
}

/// First observation initialises the average; afterwards
/// `s ← alpha · loss + (1 − alpha) · s`.
pub fn update_smoothed(s: SmoothedLoss, loss: f64, alpha: f64) -> Result<SmoothedLoss> {
    if !loss.is_finite() {
        return Err(TameError::NonFinite(loss));
    }
    if loss < 0.0 {
        return Err(TameError::config(format!("loss must be >= 0, got {loss}")));
    }
    Ok(SmoothedLoss(Some(s.candidate(loss, alpha))))
}

/// FIFO of the most recent raw batch losses.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWindow {
    values: VecDeque<f64>,
    capacity: usize,
}

impl LossWindow {
    pub fn new(capacity: usize) -> Self {
        LossWindow {
            values: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, loss: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(loss);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied()
    }

    pub fn mean(&self) -> Option<f64> {
        if self.values.is_empty() {
            return None;
        }
        Some(self.values.iter().sum::<f64>() / self.values.len() as f64)
    }

    /// Population standard deviation (divisor `n`).
    pub fn std(&self) -> Option<f64> {
        let mean = self.mean()?;
        let var = self
            .values
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / self.values.len() as f64;
        Some(var.sqrt())
    }
}

/// `mean + 3·std` of the window, or `None` while it holds fewer than `min_fill` losses.
pub fn get_threshold(window: &LossWindow, min_fill: usize) -> Option<f64> {
    if window.len() < min_fill.max(1) {
        return None;
    }
    Some(window.mean()? + 3.0 * window.std()?)
}

/// True iff the window is ready and `smoothed` exceeds its threshold.
pub fn is_deviation(smoothed: f64, window: &LossWindow, min_fill: usize) -> bool {
    get_threshold(window, min_fill).is_some_and(|t| smoothed > t)
}

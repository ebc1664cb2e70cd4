use serde::{Deserialize, Serialize};

use super::{ParamSet, Scalar};
use crate::error::{Error, Result};

/// Plain stochastic gradient descent over a registered subset of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub learning_rate: f64,
    params: Vec<String>,
}

impl SgdState {
    pub fn new(learning_rate: f64, params: impl IntoIterator<Item = String>) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(SgdState {
            learning_rate,
            params: params.into_iter().collect(),
        })
    }

    pub fn params(&self) -> &[String] {
        &self.params
    }

    /// `p ← p − ε·grad(p)` for every registered parameter, then clears the
    /// gradients of the whole set.
    pub fn step<S: Scalar>(&self, set: &mut ParamSet<S>) -> Result<()> {
        let mut ids = Vec::with_capacity(self.params.len());
        for name in &self.params {
            let id = set
                .index_of(name)
                .ok_or_else(|| Error::State(format!("parameter {name} is not in the set")))?;
            if set.get(id).grad().is_none() {
                return Err(Error::State(format!("parameter {name} has no gradient")));
            }
            ids.push(id);
        }
        let lr = S::lit(self.learning_rate);
        for id in ids {
            let t = set.get_mut(id);
            let g = t.grad().expect("checked above").to_vec();
            t.data_mut()
                .iter_mut()
                .zip(g)
                .for_each(|(p, g)| *p -= lr * g);
        }
        set.clear_grads();
        Ok(())
    }
}

/// Triangular cyclical learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CyclicalLrSchedule {
    pub lr_min: f64,
    pub lr_max: f64,
    pub cycle_length_epochs: usize,
}

impl Default for CyclicalLrSchedule {
    fn default() -> Self {
        CyclicalLrSchedule {
            lr_min: 1e-4,
            lr_max: 1e-2,
            cycle_length_epochs: 21,
        }
    }
}

impl CyclicalLrSchedule {
    pub fn new(lr_min: f64, lr_max: f64, cycle_length_epochs: usize) -> Result<Self> {
        if !(lr_min > 0.0 && lr_max >= lr_min && lr_max.is_finite()) || cycle_length_epochs == 0 {
            return Err(Error::Parameter(format!(
                "invalid cyclical schedule: lr_min={lr_min}, lr_max={lr_max}, cycle={cycle_length_epochs}"
            )));
        }
        Ok(CyclicalLrSchedule {
            lr_min,
            lr_max,
            cycle_length_epochs,
        })
    }

    /// Learning rate at a fractional epoch position (per-batch resolution).
    /// Rises linearly over the first half-cycle and falls back over the second.
    pub fn lr(&self, epoch: f64) -> f64 {
        let period = self.cycle_length_epochs as f64;
        let phase = epoch.max(0.0).rem_euclid(period) / period;
        let tri = 1.0 - (2.0 * phase - 1.0).abs();
        (self.lr_min + (self.lr_max - self.lr_min) * tri).clamp(self.lr_min, self.lr_max)
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr(epoch as f64)
    }
}

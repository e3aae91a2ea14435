use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::tape::{NodeId, Tape};
use crate::error::Result;

pub const DEFAULT_MOMENTUM: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Mean-only batch normalization: centering with no variance scaling and
/// no learned affine terms.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Array1<f64>,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        BatchNormState {
            running_mean: Array1::zeros(features),
            momentum: DEFAULT_MOMENTUM,
        }
    }

    /// Train mode centers with the batch mean and updates the running mean
    /// when `update` is set. Eval mode subtracts the running mean.
    pub fn apply(&mut self, tape: &mut Tape, x: NodeId, mode: Mode, update: bool) -> Result<NodeId> {
        match mode {
            Mode::Train => {
                let (out, mean) = tape.center_rows(x)?;
                if update {
                    self.running_mean *= 1.0 - self.momentum;
                    self.running_mean.scaled_add(self.momentum, &mean);
                }
                Ok(out)
            }
            Mode::Eval => tape.sub_const_row(x, &self.running_mean),
        }
    }

    /// Eval-mode application that cannot touch the state.
    pub fn apply_eval(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        tape.sub_const_row(x, &self.running_mean)
    }
}

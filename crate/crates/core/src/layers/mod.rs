//! Neural building blocks on top of the tape.
//!
//! Layers own [`ParamId`]s into a shared [`ParamSet`] and run their forward
//! pass through a [`Ctx`], which carries the tape, the bound parameter
//! handles and the train/eval mode.

mod batchnorm;
mod conv;
mod dense;
mod lstm;
mod pool;

pub use batchnorm::{BatchNorm, RunningStats, RunningUpdate, BN_EPS, BN_MOMENTUM};
pub use conv::{Conv1d, Conv2d};
pub use dense::Dense;
pub use lstm::{LstmLayer, LstmOutput};
pub use pool::{pool_stats, PoolAxis, PooledTriple};

use crate::params::{BoundParams, ParamId, ParamSet};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses batch statistics and reports running-stat updates.
    Train,
    /// Batch norm uses stored running statistics.
    Eval,
}

/// Forward-pass context.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a ParamSet,
    pub bound: &'a BoundParams,
    pub mode: Mode,
    /// Application site for modules reused at several depths; picks the
    /// batch-norm running statistics.
    pub site: usize,
    /// Batch-norm running-stat updates collected in train mode, in call order.
    pub updates: Vec<RunningUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a ParamSet, bound: &'a BoundParams, mode: Mode) -> Self {
        Self {
            tape,
            params,
            bound,
            mode,
            site: 0,
            updates: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }
}

use crate::error::Result;
use crate::tape::{Tape, Var};

/// Which axis of a hidden map gets reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    /// Reduce over hidden units (the last axis); one value per time step.
    Frequency,
    /// Reduce over time steps (axis 0); one value per hidden unit.
    Time,
}

/// Max, average and population standard deviation along one axis.
#[derive(Clone, Copy, Debug)]
pub struct PooledTriple {
    pub max: Var,
    pub avg: Var,
    pub std: Var,
}

/// Statistical pooling of a T×D (or T×B×D) map. The reduced axis is kept
/// with size 1.
pub fn pool_stats(tape: &mut Tape, h: Var, axis: PoolAxis) -> Result<PooledTriple> {
    let ax = match axis {
        PoolAxis::Frequency => tape.shape(h).len() - 1,
        PoolAxis::Time => 0,
    };
    Ok(PooledTriple {
        max: tape.max(h, ax)?,
        avg: tape.mean(h, Some(ax))?,
        std: tape.std(h, ax)?,
    })
}

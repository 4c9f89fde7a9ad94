use rand::Rng;

use super::Ctx;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::rng;
use crate::tape::Var;

/// Affine projection applied row-wise: N×D → N×out.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn init(params: &mut ParamSet, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = rng::uniform(rng, &[in_dim, out_dim], bound);
        let b = rng::uniform(rng, &[1, out_dim], bound);
        Self {
            weight: params.add(format!("{prefix}.weight"), w, true),
            bias: params.add(format!("{prefix}.bias"), b, true),
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::shape("dense", &shape, &[self.in_dim, self.out_dim]));
        }
        let (w, b) = (ctx.var(self.weight), ctx.var(self.bias));
        let y = ctx.tape.matmul(x, w)?;
        let b = ctx.tape.expand(b, &[shape[0], self.out_dim])?;
        ctx.tape.add(y, b)
    }
}

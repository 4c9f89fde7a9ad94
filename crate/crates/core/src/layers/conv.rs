use rand::Rng;

use super::Ctx;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::rng;
use crate::tape::Var;

/// Same-padded 1-D convolution over B×C_in×L inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

/// Same-padded square-kernel 2-D convolution over B×C_in×H×W inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "kernel size must be odd for same padding, got {kernel}"
        )));
    }
    Ok(())
}

impl Conv1d {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_kernel(kernel)?;
        let bound = 1.0 / ((in_channels * kernel) as f64).sqrt();
        let w = rng::uniform(rng, &[out_channels, in_channels, kernel], bound);
        let b = rng::uniform(rng, &[out_channels], bound);
        Ok(Self {
            weight: params.add(format!("{prefix}.weight"), w, true),
            bias: params.add(format!("{prefix}.bias"), b, true),
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * (self.in_channels * self.kernel + 1)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight), ctx.var(self.bias));
        ctx.tape.conv1d(x, w, b)
    }
}

impl Conv2d {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_kernel(kernel)?;
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        let w = rng::uniform(rng, &[out_channels, in_channels, kernel, kernel], bound);
        let b = rng::uniform(rng, &[out_channels], bound);
        Ok(Self {
            weight: params.add(format!("{prefix}.weight"), w, true),
            bias: params.add(format!("{prefix}.bias"), b, true),
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * (self.in_channels * self.kernel * self.kernel + 1)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight), ctx.var(self.bias));
        ctx.tape.conv2d(x, w, b)
    }
}

use super::{Ctx, Mode};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tape::{BatchStats, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization (channel axis 1).
///
/// Scale and shift are shared, but a module reused at several points of a
/// network keeps one set of running statistics per application site
/// (selected by [`Ctx::site`]), since the inputs at each site are
/// distributed differently.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: Vec<RunningStats>,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: ParamId,
    pub var: ParamId,
}

/// Running-stat update produced by one train-mode application.
#[derive(Clone, Debug)]
pub struct RunningUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

impl RunningUpdate {
    /// Exponential moving average; the variance estimate is unbiased.
    pub fn apply(&self, params: &mut ParamSet) -> Result<()> {
        let n = self.stats.count as f64;
        let correction = if self.stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        let blend = |old: &Tensor, new: &[f64], scale: f64| -> Result<Tensor> {
            let data = old
                .data()
                .iter()
                .zip(new)
                .map(|(&o, &b)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * b * scale)
                .collect();
            Tensor::new(old.shape(), data)
        };
        let mean = blend(params.get(self.running_mean), &self.stats.mean, 1.0)?;
        let var = blend(params.get(self.running_var), &self.stats.var, correction)?;
        params.set(self.running_mean, mean)?;
        params.set(self.running_var, var)
    }
}

impl BatchNorm {
    pub fn init(params: &mut ParamSet, prefix: &str, channels: usize) -> Self {
        Self::with_sites(params, prefix, channels, 1)
    }

    pub fn with_sites(params: &mut ParamSet, prefix: &str, channels: usize, sites: usize) -> Self {
        let gamma = params.add(format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0), true);
        let beta = params.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]), true);
        let running = (0..sites.max(1))
            .map(|k| {
                let tag = if sites > 1 { k.to_string() } else { String::new() };
                RunningStats {
                    mean: params.add(format!("{prefix}.running_mean{tag}"), Tensor::zeros(&[channels]), false),
                    var: params.add(
                        format!("{prefix}.running_var{tag}"),
                        Tensor::full(&[channels], 1.0),
                        false,
                    ),
                }
            })
            .collect();
        Self {
            gamma,
            beta,
            running,
            channels,
        }
    }

    fn site(&self, ctx: &Ctx) -> Result<RunningStats> {
        self.running.get(ctx.site).copied().ok_or_else(|| {
            Error::Data(format!(
                "batch-norm site {} out of range ({} sites)",
                ctx.site,
                self.running.len()
            ))
        })
    }

    /// Learnable scalars (scale and shift); running stats are excluded.
    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(Error::shape("batch_norm", shape, &[0, self.channels]));
        }
        let (gamma, beta) = (ctx.var(self.gamma), ctx.var(self.beta));
        let site = self.site(ctx)?;
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, BN_EPS, None)?;
                ctx.updates.push(RunningUpdate {
                    running_mean: site.mean,
                    running_var: site.var,
                    stats: stats.expect("train mode returns batch stats"),
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.params.get(site.mean).data();
                let var = ctx.params.get(site.var).data();
                let (y, _) = ctx.tape.batch_norm(x, gamma, beta, BN_EPS, Some((mean, var)))?;
                Ok(y)
            }
        }
    }
}

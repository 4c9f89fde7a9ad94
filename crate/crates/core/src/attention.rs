//! Hidden-state refinement modules.
//!
//! Every module maps a hidden feature map `H` (time-major T×B×D; a single
//! map is T×1×D) to `H' = H + sigmoid(G)` where `G` is a T×B×D gate map:
//!
//! * temporal (TA): pool over hidden units, 1-D convs along time, copy the
//!   resulting T×1 gate across all D columns;
//! * frequential (FA): pool over time, 1-D convs along hidden units, copy
//!   the 1×D gate across all T rows;
//! * dual 1 (DA-1): 2-D convs over `H` itself;
//! * dual 2 (DA-2): sum of the TA and FA gate maps before one sigmoid.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{pool_stats, BatchNorm, Conv1d, Conv2d, Ctx, PoolAxis};
use crate::params::ParamSet;
use crate::tape::Var;

pub const TA_KERNEL: usize = 11;
pub const FA_KERNEL: usize = 21;
pub const DA1_KERNEL: usize = 7;
/// Channel plan of the TA and FA conv stacks, starting from the pooled triple.
pub const GATE_CHANNELS: [usize; 5] = [3, 3, 5, 5, 1];
/// Channel plan of the DA-1 conv stack, starting from the single-channel map.
pub const DA1_CHANNELS: [usize; 4] = [1, 1, 3, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    None,
    Ta,
    Fa,
    Da1,
    Da2,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 5] = [Self::None, Self::Ta, Self::Fa, Self::Da1, Self::Da2];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Ta => "ta",
            Self::Fa => "fa",
            Self::Da1 => "da1",
            Self::Da2 => "da2",
        }
    }

    /// Whether the module pools over time and therefore needs chunking at
    /// inference.
    pub fn uses_time_pooling(self) -> bool {
        matches!(self, Self::Fa | Self::Da2)
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown attention kind '{s}' (none|ta|fa|da1|da2)")))
    }
}

/// Conv layer with optional batch norm + ReLU after it.
#[derive(Clone, Debug, PartialEq)]
struct Block<C> {
    conv: C,
    norm: Option<BatchNorm>,
}

/// Pooled-statistics gate: the TA and FA conv stacks.
#[derive(Clone, Debug, PartialEq)]
pub struct GateBranch {
    axis: PoolAxis,
    blocks: Vec<Block<Conv1d>>,
}

/// DA-1 conv stack over the hidden map as a one-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct DualConv {
    blocks: Vec<Block<Conv2d>>,
}

/// The single attention module shared by every LSTM layer of a model.
#[derive(Clone, Debug, PartialEq)]
pub enum Attention {
    None,
    Ta(GateBranch),
    Fa(GateBranch),
    Da1(DualConv),
    Da2 { ta: GateBranch, fa: GateBranch },
}

impl GateBranch {
    pub fn init(params: &mut ParamSet, prefix: &str, axis: PoolAxis, sites: usize, rng: &mut impl Rng) -> Result<Self> {
        let kernel = match axis {
            PoolAxis::Frequency => TA_KERNEL,
            PoolAxis::Time => FA_KERNEL,
        };
        let last = GATE_CHANNELS.len() - 2;
        let blocks = GATE_CHANNELS
            .windows(2)
            .enumerate()
            .map(|(i, ch)| {
                let conv = Conv1d::init(params, &format!("{prefix}.conv{i}"), ch[0], ch[1], kernel, rng)?;
                let norm = (i < last).then(|| BatchNorm::with_sites(params, &format!("{prefix}.bn{i}"), ch[1], sites));
                Ok(Block { conv, norm })
            })
            .collect::<Result<_>>()?;
        Ok(Self { axis, blocks })
    }

    pub fn axis(&self) -> PoolAxis {
        self.axis
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv1d> {
        self.blocks.iter().map(|b| &b.conv)
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.conv.param_count() + b.norm.as_ref().map_or(0, BatchNorm::param_count))
            .sum()
    }

    /// Pre-sigmoid gate map, expanded to the T×B×D shape of `h`.
    pub fn logits(&self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        let shape = hidden_shape(ctx, h)?;
        let pooled = pool_stats(ctx.tape, h, self.axis)?;
        let stack = [pooled.max, pooled.avg, pooled.std];
        // Bring the pooled triple to B×3×L conv layout, L the surviving axis.
        let (x, back): (Var, [usize; 3]) = match self.axis {
            PoolAxis::Frequency => {
                let cat = ctx.tape.concat(&stack, 2)?;
                (ctx.tape.permute(cat, &[1, 2, 0])?, [2, 0, 1])
            }
            PoolAxis::Time => {
                let cat = ctx.tape.concat(&stack, 0)?;
                (ctx.tape.permute(cat, &[1, 0, 2])?, [1, 0, 2])
            }
        };
        let mut x = x;
        for block in &self.blocks {
            x = block.conv.forward(ctx, x)?;
            if let Some(bn) = &block.norm {
                x = bn.forward(ctx, x)?;
                x = ctx.tape.relu(x);
            }
        }
        let gate = ctx.tape.permute(x, &back)?;
        ctx.tape.expand(gate, &shape)
    }

    /// Gate logits computed independently on consecutive `chunk`-row
    /// segments of `h`; the last segment may be shorter.
    pub fn logits_chunked(&self, ctx: &mut Ctx, h: Var, chunk: usize) -> Result<Var> {
        if chunk == 0 {
            return Err(Error::invalid("chunk length must be at least 1"));
        }
        let steps = hidden_shape(ctx, h)?[0];
        if steps <= chunk {
            return self.logits(ctx, h);
        }
        let mut parts = Vec::with_capacity(steps.div_ceil(chunk));
        for start in (0..steps).step_by(chunk) {
            let len = chunk.min(steps - start);
            let seg = ctx.tape.slice(h, 0, start, len)?;
            parts.push(self.logits(ctx, seg)?);
        }
        ctx.tape.concat(&parts, 0)
    }
}

impl DualConv {
    pub fn init(params: &mut ParamSet, prefix: &str, sites: usize, rng: &mut impl Rng) -> Result<Self> {
        let last = DA1_CHANNELS.len() - 2;
        let blocks = DA1_CHANNELS
            .windows(2)
            .enumerate()
            .map(|(i, ch)| {
                let conv = Conv2d::init(params, &format!("{prefix}.conv{i}"), ch[0], ch[1], DA1_KERNEL, rng)?;
                let norm = (i < last).then(|| BatchNorm::with_sites(params, &format!("{prefix}.bn{i}"), ch[1], sites));
                Ok(Block { conv, norm })
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.blocks.iter().map(|b| &b.conv)
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.conv.param_count() + b.norm.as_ref().map_or(0, BatchNorm::param_count))
            .sum()
    }

    pub fn logits(&self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        let [t, b, d] = hidden_shape(ctx, h)?;
        let x = ctx.tape.permute(h, &[1, 0, 2])?;
        let mut x = ctx.tape.reshape(x, &[b, 1, t, d])?;
        for block in &self.blocks {
            x = block.conv.forward(ctx, x)?;
            if let Some(bn) = &block.norm {
                x = bn.forward(ctx, x)?;
                x = ctx.tape.relu(x);
            }
        }
        let x = ctx.tape.reshape(x, &[b, t, d])?;
        ctx.tape.permute(x, &[1, 0, 2])
    }
}

fn hidden_shape(ctx: &Ctx, h: Var) -> Result<[usize; 3]> {
    match *ctx.tape.shape(h) {
        [t, b, d] => Ok([t, b, d]),
        ref other => Err(Error::shape("attention", other, &[0, 0, 0])),
    }
}

/// `H + sigmoid(G)`.
pub fn refine(ctx: &mut Ctx, h: Var, logits: Var) -> Result<Var> {
    let gate = ctx.tape.sigmoid(logits);
    ctx.tape.add(h, gate)
}

impl Attention {
    /// `sites` is the number of places the module is applied; each gets its
    /// own batch-norm running statistics.
    pub fn init(kind: AttentionKind, params: &mut ParamSet, sites: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(match kind {
            AttentionKind::None => Self::None,
            AttentionKind::Ta => Self::Ta(GateBranch::init(params, "attn.ta", PoolAxis::Frequency, sites, rng)?),
            AttentionKind::Fa => Self::Fa(GateBranch::init(params, "attn.fa", PoolAxis::Time, sites, rng)?),
            AttentionKind::Da1 => Self::Da1(DualConv::init(params, "attn.da1", sites, rng)?),
            AttentionKind::Da2 => Self::Da2 {
                ta: GateBranch::init(params, "attn.ta", PoolAxis::Frequency, sites, rng)?,
                fa: GateBranch::init(params, "attn.fa", PoolAxis::Time, sites, rng)?,
            },
        })
    }

    pub fn kind(&self) -> AttentionKind {
        match self {
            Self::None => AttentionKind::None,
            Self::Ta(_) => AttentionKind::Ta,
            Self::Fa(_) => AttentionKind::Fa,
            Self::Da1(_) => AttentionKind::Da1,
            Self::Da2 { .. } => AttentionKind::Da2,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::None => 0,
            Self::Ta(b) | Self::Fa(b) => b.param_count(),
            Self::Da1(d) => d.param_count(),
            Self::Da2 { ta, fa } => ta.param_count() + fa.param_count(),
        }
    }

    /// Pre-sigmoid gate map for `h`, or `None` when there is no module.
    /// With `fa_chunk` set, time pooling runs per segment of that length.
    pub fn logits(&self, ctx: &mut Ctx, h: Var, fa_chunk: Option<usize>) -> Result<Option<Var>> {
        let fa_logits = |ctx: &mut Ctx, fa: &GateBranch| match fa_chunk {
            Some(n) => fa.logits_chunked(ctx, h, n),
            None => fa.logits(ctx, h),
        };
        Ok(Some(match self {
            Self::None => return Ok(None),
            Self::Ta(ta) => ta.logits(ctx, h)?,
            Self::Fa(fa) => fa_logits(ctx, fa)?,
            Self::Da1(d) => d.logits(ctx, h)?,
            Self::Da2 { ta, fa } => {
                let temporal = ta.logits(ctx, h)?;
                let frequential = fa_logits(ctx, fa)?;
                ctx.tape.add(temporal, frequential)?
            }
        }))
    }

    /// Refined map `H'`; identity for [`Attention::None`].
    pub fn apply(&self, ctx: &mut Ctx, h: Var, fa_chunk: Option<usize>) -> Result<Var> {
        match self.logits(ctx, h, fa_chunk)? {
            Some(g) => refine(ctx, h, g),
            None => Ok(h),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::rng;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn kind_round_trips_through_strings() {
        for k in AttentionKind::ALL {
            assert_eq!(k.to_string().parse::<AttentionKind>().unwrap(), k);
        }
        assert!("cbam".parse::<AttentionKind>().is_err());
    }

    #[test]
    fn stack_layouts() {
        let mut params = ParamSet::new();
        let att = Attention::init(AttentionKind::Da2, &mut params, 1, &mut rng::seeded(0)).unwrap();
        let Attention::Da2 { ta, fa } = &att else {
            unreachable!()
        };
        assert!(ta.convs().all(|c| c.kernel == TA_KERNEL));
        assert!(fa.convs().all(|c| c.kernel == FA_KERNEL));
        let outs: Vec<usize> = ta.convs().map(|c| c.out_channels).collect();
        assert_eq!(outs, vec![3, 5, 5, 1]);
        assert_eq!(ta.convs().next().unwrap().in_channels, 3);
        assert!(ta.blocks.last().unwrap().norm.is_none());
        assert_eq!(ta.blocks.iter().filter(|b| b.norm.is_some()).count(), 3);

        let mut params = ParamSet::new();
        let Attention::Da1(d) = Attention::init(AttentionKind::Da1, &mut params, 1, &mut rng::seeded(0)).unwrap()
        else {
            unreachable!()
        };
        let outs: Vec<usize> = d.convs().map(|c| c.out_channels).collect();
        assert_eq!(outs, vec![1, 3, 1]);
        assert!(d.blocks.last().unwrap().norm.is_none());
    }

    #[test]
    fn parameter_counts() {
        let count = |k| {
            let mut params = ParamSet::new();
            let att = Attention::init(k, &mut params, 1, &mut rng::seeded(0)).unwrap();
            assert_eq!(att.param_count(), params.count_trainable("attn."));
            att.param_count()
        };
        // conv: out*(in*k+1); bn: 2 per channel on layers 1-3.
        assert_eq!(count(AttentionKind::Ta), 102 + 170 + 280 + 56 + 26);
        assert_eq!(count(AttentionKind::Fa), 192 + 320 + 530 + 106 + 26);
        assert_eq!(count(AttentionKind::Da1), 50 + 150 + 148 + 8);
        assert_eq!(count(AttentionKind::Da2), 634 + 1174);
        assert_eq!(count(AttentionKind::None), 0);
    }

    #[test]
    fn none_is_identity() {
        let params = ParamSet::new();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &params, &bound, Mode::Train);
        let h = ctx.tape.constant(rng::uniform(&mut rng::seeded(1), &[4, 1, 3], 1.0));
        let out = Attention::None.apply(&mut ctx, h, None).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn rank_two_maps_are_rejected() {
        let mut params = ParamSet::new();
        let ta = GateBranch::init(&mut params, "ta", PoolAxis::Frequency, 1, &mut rng::seeded(0)).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &params, &bound, Mode::Train);
        let bad = ctx.tape.constant(Tensor::zeros(&[4, 3]));
        assert!(ta.logits(&mut ctx, bad).is_err());
    }
}

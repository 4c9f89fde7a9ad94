//! Stacked LSTM classifier with one shared attention module.

use crate::attention::{Attention, AttentionKind};
use crate::error::{Error, Result};
use crate::layers::{Ctx, Dense, LstmLayer, Mode, RunningUpdate};
use crate::params::ParamSet;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 40;
pub const DEFAULT_LAYERS: usize = 3;
pub const DEFAULT_T_TRAIN: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub attention: AttentionKind,
    /// Sequence length seen in training; sets the inference chunk length
    /// for time-pooling attention.
    pub t_train: usize,
}

impl ModelConfig {
    /// Three-layer LSTM over 40-dim features with the given width.
    pub fn lstm(hidden: usize, attention: AttentionKind) -> Self {
        Self {
            input_dim: FEATURE_DIM,
            layers: DEFAULT_LAYERS,
            hidden,
            attention,
            t_train: DEFAULT_T_TRAIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.layers == 0 || self.hidden == 0 || self.t_train == 0 {
            return Err(Error::invalid(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Learnable-scalar counts per component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub lstm: Vec<usize>,
    pub attention: usize,
    pub head: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.lstm.iter().sum::<usize>() + self.attention + self.head
    }

    pub fn baseline(&self) -> usize {
        self.total() - self.attention
    }

    /// Attention parameters as a percentage of the attention-free model.
    pub fn overhead_percent(&self) -> f64 {
        100.0 * self.attention as f64 / self.baseline() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    lstm: Vec<LstmLayer>,
    attention: Attention,
    head: Dense,
}

/// Tape handles produced by one forward pass.
pub struct ModelOutput {
    /// Per-frame speech probabilities, T×B.
    pub probs: Var,
    /// Raw hidden map of every LSTM layer, T×B×D.
    pub hidden: Vec<Var>,
    /// Refined map of every LSTM layer (same as `hidden` without attention).
    pub refined: Vec<Var>,
}

impl Model {
    /// Deterministic initialization. The LSTM stack, head and attention
    /// module draw from separate seed streams, so models that differ only
    /// in attention kind share their LSTM and head weights.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut lstm_rng = rng::seeded(rng::derive_seed(seed, 0));
        let lstm = (0..config.layers)
            .map(|i| {
                let input = if i == 0 { config.input_dim } else { config.hidden };
                LstmLayer::init(&mut params, &format!("lstm{i}"), input, config.hidden, &mut lstm_rng)
            })
            .collect();
        let head = Dense::init(
            &mut params,
            "head",
            config.hidden,
            1,
            &mut rng::seeded(rng::derive_seed(seed, 1)),
        );
        let attention = Attention::init(
            config.attention,
            &mut params,
            config.layers,
            &mut rng::seeded(rng::derive_seed(seed, 2)),
        )?;
        Ok(Self {
            config,
            params,
            lstm,
            attention,
            head,
        })
    }

    /// Rebuilds the layer structure for `config` and fills it from `params`,
    /// which must carry exactly the expected names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Data(format!(
                "expected {} parameter arrays, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let src = params
                .find(&name)
                .ok_or_else(|| Error::Data(format!("missing parameter array '{name}'")))?;
            model
                .params
                .set(id, params.get(src).clone())
                .map_err(|_| Error::Data(format!("parameter '{name}' has the wrong shape")))?;
        }
        Ok(model)
    }

    pub fn attention(&self) -> &Attention {
        &self.attention
    }

    pub fn lstm_layers(&self) -> &[LstmLayer] {
        &self.lstm
    }

    pub fn count_params(&self) -> ParamBreakdown {
        ParamBreakdown {
            lstm: self.lstm.iter().map(LstmLayer::param_count).collect(),
            attention: self.attention.param_count(),
            head: self.head.param_count(),
        }
    }

    /// Chunk length for time-pooling attention at inference.
    pub fn eval_chunk(&self) -> Option<usize> {
        self.config.attention.uses_time_pooling().then_some(self.config.t_train)
    }

    /// Forward pass over a time-major T×B×I batch.
    ///
    /// Each LSTM layer's hidden map is refined by the shared attention
    /// module before feeding the next layer; the last refined map goes
    /// through the sigmoid head.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, fa_chunk: Option<usize>) -> Result<ModelOutput> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.config.input_dim {
            return Err(Error::shape("model input", &shape, &[0, 0, self.config.input_dim]));
        }
        let (steps, batch) = (shape[0], shape[1]);
        let mut hidden = Vec::with_capacity(self.lstm.len());
        let mut refined = Vec::with_capacity(self.lstm.len());
        let mut input = x;
        for (i, layer) in self.lstm.iter().enumerate() {
            let h = layer.forward(ctx, input, None)?.hidden;
            ctx.site = i;
            let r = self.attention.apply(ctx, h, fa_chunk)?;
            hidden.push(h);
            refined.push(r);
            input = r;
        }
        ctx.site = 0;
        let flat = ctx.tape.reshape(input, &[steps * batch, self.config.hidden])?;
        let logits = self.head.forward(ctx, flat)?;
        let probs = ctx.tape.sigmoid(logits);
        let probs = ctx.tape.reshape(probs, &[steps, batch])?;
        Ok(ModelOutput { probs, hidden, refined })
    }

    /// Eval-mode per-frame probabilities for one T×I feature matrix.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<f64>> {
        let out = self.run_eval(features)?;
        Ok(out.probs)
    }

    /// Eval-mode pass that also returns the last layer's raw and refined
    /// hidden maps (T×D each).
    pub fn run_eval(&self, features: &Tensor) -> Result<EvalPass> {
        let &[steps, dim] = features.shape() else {
            return Err(Error::shape("predict", features.shape(), &[0, self.config.input_dim]));
        };
        let x = features.reshape(&[steps, 1, dim])?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &self.params, &bound, Mode::Eval);
        let xv = ctx.tape.constant(x);
        let out = self.forward(&mut ctx, xv, self.eval_chunk())?;
        let d = self.config.hidden;
        let last = |v: Var| tape.value(v).reshape(&[steps, d]);
        Ok(EvalPass {
            probs: tape.value(out.probs).data().to_vec(),
            last_hidden: last(*out.hidden.last().expect("at least one layer"))?,
            last_refined: last(*out.refined.last().expect("at least one layer"))?,
        })
    }

    /// Applies batch-norm running-stat updates collected during training.
    pub fn apply_updates(&mut self, updates: &[RunningUpdate]) -> Result<()> {
        updates.iter().try_for_each(|u| u.apply(&mut self.params))
    }
}

pub struct EvalPass {
    pub probs: Vec<f64>,
    pub last_hidden: Tensor,
    pub last_refined: Tensor,
}

use rand::Rng;

use super::Ctx;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::rng;
use crate::tape::Var;
use crate::tensor::Tensor;

/// One unidirectional LSTM layer without peepholes.
///
/// Gate blocks are stacked in the order input, forget, cell candidate,
/// output along the `4·hidden` axis of `w_ih` (4D×I), `w_hh` (4D×D) and
/// `bias` (4D).
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

pub struct LstmOutput {
    /// All hidden states, T×B×D.
    pub hidden: Var,
    pub h_last: Var,
    pub c_last: Var,
}

impl LstmLayer {
    pub fn init(params: &mut ParamSet, prefix: &str, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let gates = 4 * hidden;
        let w_ih = rng::uniform(rng, &[gates, input_dim], 1.0 / (input_dim as f64).sqrt());
        let w_hh = rng::uniform(rng, &[gates, hidden], 1.0 / (hidden as f64).sqrt());
        let mut bias = rng::uniform(rng, &[gates], 1.0 / (hidden as f64).sqrt()).into_data();
        bias[hidden..2 * hidden].fill(1.0);
        let bias = Tensor::new(&[gates], bias).expect("bias shape");
        Self {
            w_ih: params.add(format!("{prefix}.w_ih"), w_ih, true),
            w_hh: params.add(format!("{prefix}.w_hh"), w_hh, true),
            bias: params.add(format!("{prefix}.bias"), bias, true),
            input_dim,
            hidden,
        }
    }

    pub fn param_count(&self) -> usize {
        4 * self.hidden * (self.input_dim + self.hidden + 1)
    }

    /// Runs the recurrence over a time-major T×B×I input. Initial states are
    /// B×D; `None` means zeros.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, init: Option<(Var, Var)>) -> Result<LstmOutput> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input_dim {
            return Err(Error::shape("lstm", &shape, &[0, 0, self.input_dim]));
        }
        let (steps, batch, d) = (shape[0], shape[1], self.hidden);
        let tape = &mut *ctx.tape;

        let w_ih = ctx.bound.var(self.w_ih);
        let w_hh = ctx.bound.var(self.w_hh);
        let bias = ctx.bound.var(self.bias);

        let flat = tape.reshape(x, &[steps * batch, self.input_dim])?;
        let w_ih_t = tape.transpose(w_ih)?;
        let w_hh_t = tape.transpose(w_hh)?;
        let proj = tape.matmul(flat, w_ih_t)?;
        let bias_row = tape.reshape(bias, &[1, 4 * d])?;
        let bias_full = tape.expand(bias_row, &[steps * batch, 4 * d])?;
        let proj = tape.add(proj, bias_full)?;

        let (mut h, mut c) = match init {
            Some((h0, c0)) => {
                for v in [h0, c0] {
                    if tape.shape(v) != [batch, d] {
                        return Err(Error::shape("lstm initial state", tape.shape(v), &[batch, d]));
                    }
                }
                (h0, c0)
            }
            None => {
                let z = tape.constant(Tensor::zeros(&[batch, d]));
                (z, z)
            }
        };

        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let pre = tape.slice(proj, 0, t * batch, batch)?;
            let rec = tape.matmul(h, w_hh_t)?;
            let pre = tape.add(pre, rec)?;
            let act = tape.sigmoid(pre);
            let i = tape.slice(act, 1, 0, d)?;
            let f = tape.slice(act, 1, d, d)?;
            let o = tape.slice(act, 1, 3 * d, d)?;
            let g_pre = tape.slice(pre, 1, 2 * d, d)?;
            let g = tape.tanh(g_pre);
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let squashed = tape.tanh(c);
            h = tape.mul(o, squashed)?;
            states.push(tape.reshape(h, &[1, batch, d])?);
        }
        let hidden = tape.concat(&states, 0)?;
        Ok(LstmOutput {
            hidden,
            h_last: h,
            c_last: c,
        })
    }
}

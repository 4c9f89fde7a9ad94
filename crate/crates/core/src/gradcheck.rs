//! Finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const DENOM_FLOOR: f64 = 1e-8;

/// Element-wise relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

/// Compares the tape gradient of a scalar function at `point` to central
/// differences and returns the largest element-wise relative error.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), epsilon)
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, points: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(grad_report_many(f, points, epsilon)?.max_relative_error())
}

/// Analytic and central-difference derivative of one input element.
#[derive(Clone, Copy, Debug)]
pub struct GradEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Objective value at the unperturbed point.
    pub value: f64,
    pub epsilon: f64,
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(GradEntry::relative_error).fold(0.0, f64::max)
    }

    /// Smallest derivative a central difference can distinguish from zero:
    /// a few units of rounding in the objective, divided by `2ε`.
    pub fn resolution(&self) -> f64 {
        32.0 * f64::EPSILON * self.value.abs().max(1.0) / (2.0 * self.epsilon)
    }

    /// Entries whose analytic and numeric derivatives are both below
    /// [`GradReport::resolution`]; the difference quotient is pure rounding
    /// there.
    pub fn unresolved(&self) -> impl Iterator<Item = &GradEntry> {
        let floor = self.resolution();
        self.entries
            .iter()
            .filter(move |e| e.analytic.abs() <= floor && e.numeric.abs() <= floor)
    }

    /// Largest relative error over the resolvable entries.
    pub fn max_resolved_error(&self) -> f64 {
        let floor = self.resolution();
        self.entries
            .iter()
            .filter(|e| e.analytic.abs() > floor || e.numeric.abs() > floor)
            .map(GradEntry::relative_error)
            .fold(0.0, f64::max)
    }
}

/// Per-element comparison of tape gradients against central differences.
pub fn grad_report_many<F>(f: F, points: &[Tensor], epsilon: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::invalid("grad_check epsilon must be positive"));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item();
    let grads = tape.backward(out)?;

    let mut entries = Vec::new();
    let mut probe = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        let analytic = grads.get(vars[pi]);
        for i in 0..point.len() {
            let mut data = point.data().to_vec();
            data[i] += epsilon;
            probe[pi] = Tensor::new(point.shape(), data.clone())?;
            let up = eval(&probe)?;
            data[i] -= 2.0 * epsilon;
            probe[pi] = Tensor::new(point.shape(), data)?;
            let down = eval(&probe)?;
            entries.push(GradEntry {
                input: pi,
                index: i,
                analytic: analytic.data()[i],
                numeric: (up - down) / (2.0 * epsilon),
            });
        }
        probe[pi] = point.clone();
    }
    Ok(GradReport {
        value,
        epsilon,
        entries,
    })
}

/// Gradient check over every trainable entry of `params` plus `inputs`.
/// Non-trainable entries are bound as constants.
pub fn grad_check_params<F>(params: &ParamSet, inputs: &[Tensor], epsilon: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &BoundParams, &[Var]) -> Result<Var>,
{
    Ok(grad_report_params(params, inputs, epsilon, f)?.max_relative_error())
}

/// [`grad_report_many`] over the trainable entries of `params` (in
/// [`ParamSet::ids`] order) followed by `inputs`.
pub fn grad_report_params<F>(params: &ParamSet, inputs: &[Tensor], epsilon: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &BoundParams, &[Var]) -> Result<Var>,
{
    let trainable: Vec<_> = params.ids().filter(|&id| params.is_trainable(id)).collect();
    let points: Vec<Tensor> = trainable
        .iter()
        .map(|&id| params.get(id).clone())
        .chain(inputs.iter().cloned())
        .collect();
    grad_report_many(
        |tape, vars| {
            let mut next = vars.iter();
            let bound: Vec<Var> = params
                .ids()
                .map(|id| {
                    if params.is_trainable(id) {
                        *next.next().expect("one var per trainable entry")
                    } else {
                        tape.constant(params.get(id).clone())
                    }
                })
                .collect();
            let bound = BoundParams::from_vars(bound);
            f(tape, &bound, &vars[trainable.len()..])
        },
        &points,
        epsilon,
    )
}

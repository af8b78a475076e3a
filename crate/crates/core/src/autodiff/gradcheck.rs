use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked elements of `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// `(input, element)` where the max was attained.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Central-difference check of `d f / d input` for a scalar-valued `f`.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(input),
        eps,
        None,
    )?;
    Ok(report.max_rel_error)
}

/// Checks every input of `f`. With `max_per_input`, only an evenly strided
/// subset of each input's elements is perturbed.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    max_per_input: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item();
    let again = eval(inputs)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic((base - again).abs()));
    }
    let grads = tape.backward(out)?;

    let mut values = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (i, var) in vars.iter().enumerate() {
        let numel = values[i].numel();
        let analytic = grads.get_or_zeros(*var, numel);
        let step = max_per_input.map_or(1, |m| numel.div_ceil(m.max(1)));
        for e in (0..numel).step_by(step) {
            let orig = values[i].data()[e];
            values[i].data_mut()[e] = orig + eps;
            let plus = eval(&values)?;
            values[i].data_mut()[e] = orig - eps;
            let minus = eval(&values)?;
            values[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[e];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (i, e);
            }
        }
    }
    Ok(report)
}

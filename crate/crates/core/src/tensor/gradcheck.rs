//! Finite-difference verification of reverse-mode gradients.

use super::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

/// Outcome of a gradient check; `max_rel_err` is the headline number.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub elements_checked: usize,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &ids);
    tape.item(out)
}

/// Compare reverse-mode gradients of the scalar produced by `f` against
/// central differences `(f(x+eps) - f(x-eps)) / (2 eps)` for every element
/// of every input.
///
/// `f` must be deterministic: any randomness (dropout masks, noise draws)
/// has to be frozen in captured state. The relative error denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let base = eval_scalar(&f, inputs);
    let again = eval_scalar(&f, inputs);
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two evaluations at the same point differ: {base:?} vs {again:?}"
        )));
    }
    if !base.is_finite() {
        return Err(Error::NonFinite("gradient check base value".into()));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &ids);
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        elements_checked: 0,
    };

    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for k in 0..t.numel() {
            let orig = t.data()[k];
            probe[ti].data_mut()[k] = orig + eps;
            let up = eval_scalar(&f, &probe);
            probe[ti].data_mut()[k] = orig - eps;
            let down = eval_scalar(&f, &probe);
            probe[ti].data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ti][k];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient check at input {ti} element {k}"
                )));
            }
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.elements_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, k);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.0, 0.0, 5.5, -0.1]).unwrap();
        let rep = check_gradients(
            |tape, ids| {
                let sq = tape.square(ids[0]);
                tape.sum_all(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-7, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn nondeterministic_function_rejected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0_f64);
        let x = Tensor::scalar(1.0);
        let err = check_gradients(
            move |tape, ids| {
                counter.set(counter.get() + 1.0);
                let c = tape.constant_scalar(counter.get());
                let y = tape.mul(ids[0], c);
                tape.sum_all(y)
            },
            &[x],
            1e-5,
        );
        assert!(matches!(err, Err(Error::NonDeterministic(_))));
    }
}

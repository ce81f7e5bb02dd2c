//! Central finite-difference gradient checking.
//!
//! The checker is deliberately ignorant of the tape: it only evaluates the
//! scalar function at perturbed points, so it can judge any analytic gradient
//! independently of how that gradient was obtained.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport<T> {
    pub analytic: Tensor<T>,
    pub numeric: Tensor<T>,
    /// `|analytic − numeric| / max(1, |analytic|, |numeric|)` per element.
    pub rel_errors: Vec<T>,
    pub max_rel_error: T,
    /// Indices whose relative error exceeds the tolerance.
    pub flagged: Vec<usize>,
}

impl<T: Scalar> GradCheckReport<T> {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Relative error with a unit floor on the denominator, so entries of a
/// vanishing gradient are judged in absolute terms.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    let denom = T::one().max(analytic.abs()).max(numeric.abs());
    (analytic - numeric).abs() / denom
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient<T, F>(f: F, x: &Tensor<T>, epsilon: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    if epsilon <= T::zero() {
        return Err(Error::Input("finite-difference epsilon must be positive".into()));
    }
    let base = f(x)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("f(x) is not finite: {base}")));
    }
    let two_eps = epsilon + epsilon;
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite evaluation while perturbing element {i}"
            )));
        }
        out.data_mut()[i] = (plus - minus) / two_eps;
    }
    Ok(out)
}

/// Compares `analytic` against the central differences of `f` at `x`.
pub fn finite_difference_check<T, F>(
    f: F,
    x: &Tensor<T>,
    analytic: &Tensor<T>,
    epsilon: T,
    tolerance: T,
) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    analytic.expect_same_shape(x, "finite_difference_check")?;
    let numeric = numeric_gradient(f, x, epsilon)?;
    let rel_errors: Vec<T> = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .collect();
    let max_rel_error = rel_errors.iter().copied().fold(T::zero(), T::max);
    let flagged = rel_errors
        .iter()
        .enumerate()
        .filter(|(_, &e)| !(e <= tolerance))
        .map(|(i, _)| i)
        .collect();
    Ok(GradCheckReport {
        analytic: analytic.clone(),
        numeric,
        rel_errors,
        max_rel_error,
        flagged,
    })
}

/// Checks the tape gradient of a graph with respect to several inputs.
///
/// `build` receives one parameter [`Var`] per entry of `inputs` and must
/// return a `1 x 1` output. The analytic gradient comes from a single
/// backward pass; the numeric one from forward evaluations only. Returns one
/// report per input.
pub fn check_tape_gradients<T, F>(
    build: F,
    inputs: &[Tensor<T>],
    epsilon: T,
    tolerance: T,
) -> Result<Vec<GradCheckReport<T>>>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, T>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let evaluate = |values: &[Tensor<T>]| -> Result<T> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, T>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&tape, &vars)?;
        let v = out.value().item();
        Ok(v)
    };

    let mut reports = Vec::with_capacity(inputs.len());
    for (idx, input) in inputs.iter().enumerate() {
        let f = |probe: &Tensor<T>| {
            let mut values = inputs.to_vec();
            values[idx] = probe.clone();
            evaluate(&values)
        };
        reports.push(finite_difference_check(f, input, &analytic[idx], epsilon, tolerance)?);
    }
    Ok(reports)
}

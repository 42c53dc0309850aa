//! Central finite-difference verification of tape gradients.

use crate::error::{NdError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so entries whose true
/// gradient is ~0 are compared on an absolute scale. With a step of 1e-6
/// the central difference carries roughly 1e-10 of rounding noise.
const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    pub passed: bool,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn eval_value<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = points
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let v = f(&tape, &vars)?.item();
    if !v.is_finite() {
        return Err(NdError::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Compares `analytic` against central differences of `value` at `points`.
pub fn finite_difference_check(
    value: impl Fn(&[Tensor]) -> Result<f64>,
    analytic: &[Tensor],
    points: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        passed: true,
    };
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        for idx in 0..point.numel() {
            let x0 = point.data()[idx];
            work[pi].data_mut()[idx] = x0 + eps;
            let up = value(&work)?;
            work[pi].data_mut()[idx] = x0 - eps;
            let down = value(&work)?;
            work[pi].data_mut()[idx] = x0;
            if !up.is_finite() || !down.is_finite() {
                return Err(NdError::NonFinite { op: "grad_check" });
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data()[idx];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (pi, idx);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

/// Checks the tape gradient of a scalar function of several tensors.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = points
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::new(p.shape().to_vec(), vec![0.0; p.numel()]).expect("same shape"))
        })
        .collect();
    finite_difference_check(|pts| eval_value(&f, pts), &analytic, points, eps, tol)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), eps, tol)
}

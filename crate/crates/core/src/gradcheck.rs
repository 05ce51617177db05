//! Central finite-difference gradient oracle.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients with magnitude below this are compared absolutely.
pub const GRAD_MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, GRAD_MAGNITUDE_FLOOR)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

fn evaluate<F>(f: &F, x: Tensor) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let out = f(tape.leaf(x))?;
    let value = out.value();
    if value.len() != 1 {
        return Err(Error::invalid(format!(
            "finite_diff_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.item())
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// `(f(x + h·eᵢ) - f(x - h·eᵢ)) / 2h`.
///
/// Non-finite function values mark the report as failed rather than erroring.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic = {
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let out = f(leaf)?;
        tape.backward(out)?;
        tape.grad(leaf).unwrap_or_else(|| Tensor::zeros(x.shape()))
    };

    let mut numeric = Tensor::zeros(x.shape());
    let mut finite = analytic.is_finite();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (fp, fm) = (evaluate(&f, plus)?, evaluate(&f, minus)?);
        finite &= fp.is_finite() && fm.is_finite();
        numeric.data_mut()[i] = (fp - fm) / (2.0 * h);
    }

    let (mut max_rel_error, mut worst_index) = (0.0, 0);
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(GRAD_MAGNITUDE_FLOOR);
        if !(err <= max_rel_error) {
            max_rel_error = err;
            worst_index = i;
        }
    }
    if !finite {
        max_rel_error = f64::INFINITY;
    }
    Ok(GradCheckReport {
        passed: finite && max_rel_error < tol,
        analytic,
        numeric,
        max_rel_error,
        worst_index,
    })
}

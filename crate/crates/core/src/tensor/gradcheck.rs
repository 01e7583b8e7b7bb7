use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Central-difference gradient of a scalar function of one tensor.
pub fn central_differences<F>(f: F, at: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape<'t>, Var<'t>) -> Result<Var<'t>>,
{
    let eval = |point: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(point);
        Ok(f(&tape, x)?.item())
    };
    let mut grad = Vec::with_capacity(at.numel());
    for i in 0..at.numel() {
        let mut plus = at.clone();
        plus.data_mut()[i] += eps;
        let mut minus = at.clone();
        minus.data_mut()[i] -= eps;
        grad.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(grad)
}

/// Largest coordinate-wise relative error between the tape gradient of `f`
/// at `at` and central differences with step `eps`:
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
///
/// A NaN anywhere is returned as NaN rather than being swallowed by `max`.
pub fn finite_diff_check<F>(f: F, at: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<'t>, Var<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let x = tape.param(at.clone());
        let loss = f(&tape, x)?;
        let grads = tape.backward(loss)?;
        grads
            .wrt(x)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; at.numel()])
    };
    let numeric = central_differences(&f, at, eps)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        let err = (a - n).abs() / (a.abs() + n.abs() + 1e-12);
        if err.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

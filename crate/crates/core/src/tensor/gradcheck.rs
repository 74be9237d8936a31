use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Compares tape gradients of a scalar function against central differences.
///
/// Returns `max_i |analytic_i − numeric_i| / (|numeric_i| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&tape, xv)?;
    tape.backward(loss)?;
    let analytic = xv.grad().expect("backward fills every grad slot");

    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.param(t.clone());
        Ok(f(&tape, v)?.scalar_value())
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

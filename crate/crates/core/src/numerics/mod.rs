//! Dense tensor math and reverse-mode gradients.

mod tape;
mod tensor;

pub use tape::{Gradients, MacCategory, MacCounts, Tape, Var};
pub use tensor::{Tensor, LAYER_NORM_EPS};

use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function.
pub fn central_difference(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite value while perturbing coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `f` at `x` against central differences with
/// step `h` and returns the maximum relative error.
///
/// `f` receives a fresh tape and the leaf holding `x`, and must return a
/// scalar node.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {h} outside [1e-5, 1e-2]"
        )));
    }
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = f(&mut tape, input)?;
    let value = tape.value(out);
    if value.numel() != 1 || !value.is_finite() {
        return Err(Error::Evaluation(format!(
            "function value at x is not a finite scalar: {:?}",
            value.data()
        )));
    }
    let analytic = tape.backward(out)?.get_or_zeros(input, x.shape());

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(p.clone());
        let o = f(&mut t, v)?;
        Ok(t.value(o).data()[0])
    };
    let numeric = central_difference(eval, x, h)?;
    Ok(max_relative_error(&analytic, &numeric))
}

//! Central finite-difference gradient checking.

use crate::scalar::Scalar;

use super::{Tape, Tensor, TensorError, Var};

/// Checks the tape gradient of a scalar-valued function against central
/// finite differences at `x`, coordinate by coordinate. Returns the maximum
/// relative error `|a - n| / max(1e-8, |a| + |n|)`.
///
/// The numeric side only ever runs forward passes, so it is independent of
/// every backward rule it is checking.
pub fn grad_check<F, G>(f: G, x: &Tensor<F>, h: f64) -> Result<f64, TensorError>
where
    F: Scalar,
    G: Fn(&mut Tape<F>, Var) -> Result<Var, TensorError>,
{
    // Analytic gradient.
    let mut tape = Tape::new();
    let xv = tape.param(x);
    let y = f(&mut tape, xv)?;
    if tape.data_of(y).len() != 1 {
        return Err(TensorError::Argument(
            "grad_check needs a scalar-valued function".into(),
        ));
    }
    tape.backward(y)?;
    let analytic = tape.grad_of(xv).unwrap().to_vec();

    let eval = |t: &Tensor<F>| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let xv = tape.constant(t);
        let y = f(&mut tape, xv)?;
        Ok(tape.scalar_value(y).as_f64())
    };

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + F::from_f64(h);
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - F::from_f64(h);
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = a.as_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

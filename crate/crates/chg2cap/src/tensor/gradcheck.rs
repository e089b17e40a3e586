//! Finite-difference gradient checking.

use super::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compare reverse-mode gradients of `f` at `x` against central finite
/// differences.
///
/// `f` receives a fresh tape and the id of the staged probe tensor and must
/// return a scalar loss built on that tape. Returns the maximum over elements
/// of `|autodiff - central| / max(1, |central|)`.
///
/// `f` must be deterministic; the function is evaluated twice up front and a
/// bitwise mismatch is reported as an error. A non-positive or non-finite
/// step is rejected.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidStep { step });
    }

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let id = tape.leaf(probe.clone());
        let loss = f(&mut tape, id)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss {
                numel: tape.value(loss).numel(),
            });
        }
        Ok(tape.value(loss).data()[0])
    };

    let first = eval(x)?;
    let second = eval(x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    // Reverse-mode gradient.
    let mut tape = Tape::new();
    let id = tape.leaf(x.clone().with_grad());
    let loss = f(&mut tape, id)?;
    tape.backward(loss)?;
    let autodiff: Vec<f64> = match tape.grad(id) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };

    // Central differences, one element at a time.
    let mut max_err: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let central = (plus - minus) / (2.0 * step);
        let err = (autodiff[i] - central).abs() / central.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

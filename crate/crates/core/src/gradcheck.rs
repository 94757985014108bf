//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Maximum relative error between the analytic gradient of `f` at `x` and
/// central differences `(f(x+eps) - f(x-eps)) / 2eps`, taken elementwise as
/// `|a - n| / max(1e-8, |a| + |n|)`.
///
/// Entries closer than `10·eps` to zero are pushed out to `±10·eps` first so
/// ReLU-style kinks are not straddled. Run with `T = f64` to keep the
/// difference quotient above rounding noise.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut x = x.clone();
    let guard = 10.0 * eps;
    for v in x.data_mut() {
        let p = v.to_f64();
        if p.abs() < guard {
            *v = T::from_f64(if p < 0.0 { -guard } else { guard });
        }
    }

    let eval = |input: &Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(input.clone(), true);
        let out = f(&mut tape, xv)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        Ok(tape.value(out).item().to_f64())
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic: Vec<f64> = match tape.grad(xv) {
        Some(g) => g.data().iter().map(|&v| Scalar::to_f64(v)).collect(),
        None => vec![0.0; x.numel()],
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let mut plus = x.clone();
        plus.data_mut()[i] = T::from_f64(orig.to_f64() + eps);
        let mut minus = x.clone();
        minus.data_mut()[i] = T::from_f64(orig.to_f64() - eps);
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

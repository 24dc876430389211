use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences.
///
/// Returns `max_i |analytic_i - fd_i| / (|fd_i| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'a> Fn(&'a Tape, Var<'a>) -> Result<Var<'a>>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Invalid(format!("eps {eps} outside (0, 1e-2]")));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(point);
        let out = f(&tape, v)?;
        let value = out.value();
        if value.len() != 1 {
            return Err(Error::Shape(format!(
                "grad_check needs a scalar function, got shape {:?}",
                value.shape()
            )));
        }
        Ok(value.data()[0])
    };

    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&tape, v)?;
    let analytic = tape.backward(out)?.wrt(v);

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - fd).abs() / (fd.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

//! Finite-difference validation of tape gradients.

use super::{Array, Tape, Var};
use crate::error::{Error, Result};

/// Central differences of `f` at `point`, one coordinate at a time.
pub fn central_difference(
    f: impl Fn(&[f64]) -> Result<f64>,
    point: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x)?;
        x[i] = orig - eps;
        let down = f(&x)?;
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("function value near coordinate {i}")));
        }
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// Largest `|analytic - fd| / max(1, |fd|)` over coordinates, where `fd` is
/// the central difference with step `eps`.
pub fn max_relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / f.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compare the tape gradient of `build` against central differences.
///
/// `build` receives a fresh tape and a `[1, n]` parameter leaf holding the
/// evaluation point and must return a scalar node.
pub fn grad_check<F>(build: F, point: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let eval = |x: &[f64]| -> Result<(Tape, Var, Var)> {
        let mut tape = Tape::new();
        let p = tape.param(Array::row(x))?;
        let out = build(&mut tape, p)?;
        Ok((tape, p, out))
    };
    let (tape, p, out) = eval(point)?;
    let value = tape.value(out).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("function value at the check point".into()));
    }
    let analytic = tape.backward(out)?.get_or_zeros(p, tape.value(p));
    let fd = central_difference(
        |x| {
            let (t, _, o) = eval(x)?;
            Ok(t.value(o).item())
        },
        point,
        eps,
    )?;
    Ok(max_relative_error(analytic.data(), &fd))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = grad_check(|t, x| t.mul(x, x).and_then(|y| t.sum(y)), &[3.0], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(
            |t, _x| t.constant(Array::scalar(4.0)),
            &[1.0, 2.0],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let r = grad_check(
            |t, x| {
                let l = t.log(x)?;
                t.sum(l)
            },
            &[0.0],
            1e-5,
        );
        assert!(r.is_err());
    }

    #[test]
    fn rejects_bad_step() {
        assert!(grad_check(|t, x| t.sum(x), &[1.0], 0.0).is_err());
    }
}

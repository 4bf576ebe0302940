//! Central-difference gradient verification.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Graph builder: given a tape and the input variable, return a scalar.
pub trait ScalarFn: Fn(&mut Tape<f64>, Var) -> Result<Var> {}
impl<F: Fn(&mut Tape<f64>, Var) -> Result<Var>> ScalarFn for F {}

fn eval(f: &impl ScalarFn, x: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let y = f(&mut tape, v)?;
    let out = tape.value(y).item()?;
    if !out.is_finite() {
        return Err(Error::NonFinite("finite_diff_check objective".into()));
    }
    Ok(out)
}

/// Analytic gradient of `f` at `x` via the tape.
pub fn analytic_grad(f: &impl ScalarFn, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let y = f(&mut tape, v)?;
    if !tape.value(y).all_finite() {
        return Err(Error::NonFinite("finite_diff_check objective".into()));
    }
    tape.backward(y)?;
    Ok(tape
        .grad(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
}

/// Components smaller than this fraction of the largest analytic component
/// are measured against that fraction instead of their own magnitude.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR * scale)`, where `scale` is the
/// largest analytic magnitude of the tensor being checked.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let den = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR * scale).max(1e-300);
    if analytic == numeric {
        0.0
    } else {
        (analytic - numeric).abs() / den
    }
}

/// Max relative error between the tape gradient and central differences,
/// over every component of `x`. See [`relative_error`].
pub fn finite_diff_check(f: impl ScalarFn, x: &Tensor<f64>, step: f64) -> Result<f64> {
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, step, &all)
}

/// Like [`finite_diff_check`] but only over the listed flat indices. Used
/// for large parameter tensors.
pub fn finite_diff_check_at(
    f: impl ScalarFn,
    x: &Tensor<f64>,
    step: f64,
    indices: &[usize],
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("step must be positive, got {step}")));
    }
    let analytic = analytic_grad(&f, x)?;
    let scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric, scale));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Exec;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::from_f64(vec![5], &[0.3, -1.2, 2.5, 7.0, -0.01]).unwrap();
        let err = finite_diff_check(
            |t: &mut Tape<f64>, v| {
                let sq = t.mul(&v, &v)?;
                t.sum(&sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "err {err}");
    }

    #[test]
    fn floor_scales_with_largest_component() {
        assert_eq!(relative_error(1.0, 1.0, 1.0), 0.0);
        assert!((relative_error(1e-8, 2e-8, 1.0) - 1e-5).abs() < 1e-12);
        assert!((relative_error(0.5, 0.6, 1.0) - 1.0 / 6.0).abs() < 1e-12);
        assert!((relative_error(1e-8, 2e-8, 1e-3) - 1e-2).abs() < 1e-12);
    }

    #[test]
    fn constant_map_is_zero() {
        let x = Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap();
        let err = finite_diff_check(
            |t: &mut Tape<f64>, _v| Ok(t.constant(Tensor::scalar(4.0))),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_rejected() {
        let x = Tensor::from_f64(vec![1], &[-1.0]).unwrap();
        let r = finite_diff_check(
            |t: &mut Tape<f64>, v| {
                let l = t.log(&v)?;
                t.sum(&l)
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}

//! Central finite-difference verification of analytic gradients.

use super::{Tape, TensorRef};
use crate::error::{Error, Result};

/// One-sided derivatives disagreeing by more than this (relative) mark a
/// non-smooth coordinate, which is excluded from the comparison. A kink that
/// slips under this threshold perturbs the central difference by at most
/// half of it, keeping the residual below the 1e-4 comparisons this checker
/// serves; smooth coordinates stay below it at h ~ 1e-5 unless curvature is
/// extreme, in which case dropping them only narrows coverage.
const KINK_TOL: f64 = 1e-4;

/// Compare the tape gradient of the scalar function `f` at `x` against
/// central finite differences with step `h`, returning the maximum over
/// coordinates of `|analytic - numeric| / max(1, |analytic|)`.
///
/// Coordinates where `f` is locally non-smooth (one-sided derivatives
/// disagree) are excluded.
pub fn grad_check<F>(f: F, x_data: &[f64], x_shape: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorRef) -> Result<TensorRef>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::contract(
            "grad_check",
            format!("step {} outside [1e-7, 1e-3]", h),
        ));
    }
    let n = x_data.len();

    let mut tape = Tape::new();
    let x = tape.leaf(x_data.to_vec(), x_shape, true)?;
    let loss = f(&mut tape, x)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::contract("grad_check", "f must be scalar-valued"));
    }
    let f0 = tape.value(loss)[0];
    tape.backward(loss)?;
    let analytic: Vec<f64> = match tape.grad(x) {
        Some(g) => g.to_vec(),
        None => vec![0.0; n],
    };

    let eval = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let xt = t.leaf(data.to_vec(), x_shape, false)?;
        let l = f(&mut t, xt)?;
        Ok(t.value(l)[0])
    };

    let mut max_err = 0.0f64;
    let mut perturbed = x_data.to_vec();
    for i in 0..n {
        let orig = perturbed[i];
        perturbed[i] = orig + h;
        let fp = eval(&perturbed)?;
        perturbed[i] = orig - h;
        let fm = eval(&perturbed)?;
        perturbed[i] = orig;

        let d_plus = (fp - f0) / h;
        let d_minus = (f0 - fm) / h;
        let scale = 1.0 + d_plus.abs().max(d_minus.abs());
        if (d_plus - d_minus).abs() > KINK_TOL * scale {
            continue;
        }
        let central = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - central).abs() / analytic[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_gradient_is_exact() {
        let err = grad_check(
            |t, x| Ok(t.sum(x)),
            &[0.3, -1.2, 7.0],
            &[3],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "err = {}", err);
    }

    #[test]
    fn softmax_weighted_sum() {
        let x: Vec<f64> = vec![0.4, -0.8, 1.3, 0.1, -0.2, 2.0, -1.5, 0.9];
        let err = grad_check(
            |t, x| {
                let s = t.softmax(x, 0)?;
                let p = t.mul(s, x)?;
                Ok(t.sum(p))
            },
            &x,
            &[8],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {}", err);
    }

    #[test]
    fn relu_kink_coordinate_is_excluded() {
        // middle coordinate sits exactly on the kink; the others are smooth
        let err = grad_check(
            |t, x| {
                let r = t.relu(x);
                Ok(t.sum(r))
            },
            &[1.0, 0.0, -2.0],
            &[3],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "err = {}", err);
    }

    #[test]
    fn bilinear_product_gradient() {
        // loss = sum(A·B) against the transposed-product rule
        let a: Vec<f64> = vec![0.5, -1.0, 0.25, 2.0, 1.5, -0.75];
        let err = grad_check(
            |t, x| {
                let b = t.leaf(vec![0.3, -0.6, 1.2, 0.8, -0.4, 0.9], &[3, 2], false)?;
                let c = t.matmul(x, b)?;
                Ok(t.sum(c))
            },
            &a,
            &[2, 3],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {}", err);
    }

    #[test]
    fn rejects_out_of_range_step() {
        assert!(grad_check(|t, x| Ok(t.sum(x)), &[1.0], &[1], 1e-2).is_err());
    }
}

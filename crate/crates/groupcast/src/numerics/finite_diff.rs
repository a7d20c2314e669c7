//! Central finite differences: the independent oracle for reverse-mode
//! gradients. Always evaluated in double precision.

use crate::error::{Error, Result};

/// Central difference (f(θ+ε) − f(θ−ε)) / 2ε for every scalar in `theta`.
///
/// `f` must be deterministic. A non-finite evaluation fails the whole check.
pub fn finite_diff_grad<Func>(f: Func, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    Func: Fn(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite difference eps must be > 0, got {eps}")));
    }
    let mut work = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = work[i];

        work[i] = orig + eps;
        let f_plus = f(&work)?;
        work[i] = orig - eps;
        let f_minus = f(&work)?;
        work[i] = orig;

        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective non-finite near parameter {i}: f+={f_plus}, f-={f_minus}"
            )));
        }
        grad.push((f_plus - f_minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Relative error with an absolute floor: |a − b| / max(|a|, |b|, floor).
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Differences at or below this are indistinguishable from the cancellation
/// noise of double-precision central differences on an order-one objective.
pub const FD_NOISE_FLOOR: f64 = 1e-10;

/// Relative error of one parameter group: the largest componentwise
/// difference, normalized by the group's gradient magnitude (infinity norm
/// across both sides) with a 1e-8 floor. Tiny individual components are
/// judged against the group scale rather than their own, and a group whose
/// worst difference sits at the finite-difference noise floor counts as
/// exact — central differences cannot resolve below it, and a genuine
/// adjoint defect lands orders of magnitude above.
pub fn group_relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    debug_assert_eq!(analytic.len(), fd.len());
    let mut scale = 0.0f64;
    let mut worst = 0.0f64;
    for (&a, &f) in analytic.iter().zip(fd) {
        scale = scale.max(a.abs()).max(f.abs());
        worst = worst.max((a - f).abs());
    }
    if worst <= FD_NOISE_FLOOR {
        return 0.0;
    }
    worst / scale.max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_analytic_slope() {
        let g = finite_diff_grad(|p| Ok(p[0] * p[0]), &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() <= 1e-7, "got {}", g[0]);
    }

    #[test]
    fn abs_at_zero_is_symmetric() {
        let g = finite_diff_grad(|p| Ok(p[0].abs()), &[0.0], 1e-4).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn rejects_non_positive_eps() {
        assert!(finite_diff_grad(|p| Ok(p[0]), &[1.0], 0.0).is_err());
    }

    #[test]
    fn reports_non_finite_objective() {
        let r = finite_diff_grad(|p| Ok(1.0 / (p[0] - 1.0)), &[1.0], 1e-6);
        // f(1 ± eps) is finite, but f at other points may not be; force it:
        assert!(r.is_ok());
        let r2 = finite_diff_grad(|_| Ok(f64::NAN), &[1.0], 1e-6);
        assert!(matches!(r2, Err(Error::NonFinite(_))));
    }
}

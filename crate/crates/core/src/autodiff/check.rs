//! Central finite-difference verification of analytic gradients.
//!
//! Works in f64 only: the comparisons involved are meaningless at f32
//! precision. The guarded variant additionally asks the function for a
//! "kink signature" — a hash of every relu sign and pool argmax choice —
//! and skips coordinates whose +/- eps evaluations land on different sides
//! of a kink, where the central difference does not estimate the
//! subgradient the analytic pass computes.

use crate::tensor::Tensor;

use super::AutodiffError;

/// Relative error with an absolute floor of 1:
/// `|a - n| / max(1, |a|, |n|)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Coordinates compared against the analytic gradient.
    pub checked: usize,
    /// Coordinates skipped because the +/- eps evaluations crossed a kink.
    pub skipped: usize,
}

/// Verify `analytic` against central finite differences of `f`.
///
/// `f` maps the parameter set to a scalar loss and must be deterministic;
/// it is evaluated twice on unperturbed parameters first, and a bitwise
/// mismatch aborts with [`AutodiffError::NonDeterministicFunction`].
/// Returns the maximum relative error over every parameter coordinate.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[Tensor<f64>]) -> f64,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    eps: f64,
) -> Result<f64, AutodiffError> {
    let report = finite_diff_check_guarded(&mut |ps| (f(ps), 0), params, analytic, eps)?;
    Ok(report.max_rel_err)
}

/// Like [`finite_diff_check`] but `f` also returns a kink signature; any
/// coordinate whose two evaluations disagree on the signature is skipped
/// (and counted) instead of compared.
pub fn finite_diff_check_guarded(
    f: &mut dyn FnMut(&[Tensor<f64>]) -> (f64, u64),
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    eps: f64,
) -> Result<CheckReport, AutodiffError> {
    if params.len() != analytic.len() {
        return Err(crate::tensor::TensorError::RankError {
            op: "finite_diff_check",
            msg: format!(
                "{} parameter tensors but {} gradient tensors",
                params.len(),
                analytic.len()
            ),
        }
        .into());
    }
    for (p, a) in params.iter().zip(analytic) {
        if p.shape() != a.shape() {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "finite_diff_check",
                left: p.shape().to_string(),
                right: a.shape().to_string(),
            }
            .into());
        }
    }

    let (l1, s1) = f(params);
    let (l2, s2) = f(params);
    if l1.to_bits() != l2.to_bits() || s1 != s2 {
        return Err(AutodiffError::NonDeterministicFunction(format!(
            "two evaluations of the loss differed: {l1} vs {l2}"
        )));
    }

    let mut report = CheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut scratch: Vec<Tensor<f64>> = params.to_vec();
    for pi in 0..params.len() {
        for ci in 0..params[pi].count() {
            let orig = params[pi].data()[ci];

            scratch[pi] = params[pi].clone();
            scratch[pi].data_mut()[ci] = orig + eps;
            let (lp, sp) = f(&scratch);
            scratch[pi] = params[pi].clone();
            scratch[pi].data_mut()[ci] = orig - eps;
            let (lm, sm) = f(&scratch);
            scratch[pi] = params[pi].clone();

            if sp != sm {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[pi].data()[ci];
            let e = rel_err(a, numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

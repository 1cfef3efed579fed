//! Central finite-difference gradient checking.
//!
//! The checker only uses forward evaluation (leaf perturbation followed by
//! [`Graph::forward_eval`]), so it stays independent of the backward pass it
//! verifies.

use super::{Graph, Tensor};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_REL_TOL: f64 = 1e-4;
pub const DEFAULT_ABS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Entries that failed both the relative and the absolute tolerance.
    pub failures: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares analytic gradients of the scalar `root` with respect to `leaves`
/// against central differences with step `h`.
///
/// An entry passes when `|a - n| <= abs_tol` or
/// `|a - n| / max(|a|, |n|) < rel_tol`.
pub fn check(g: &mut Graph, root: Tensor, leaves: &[Tensor], h: f64, rel_tol: f64, abs_tol: f64) -> Result<GradCheckReport> {
    g.zero_grad();
    g.forward_eval(root)?;
    g.backward(root)?;
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, failures: 0, checked: 0 };
    for &leaf in leaves {
        let analytic = g.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(leaf).len()]);
        let base = g.value(leaf).to_vec();
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus[k] += h;
            g.set_value(leaf, plus)?;
            let f_plus = g.forward_eval(root)?[0];
            let mut minus = base.clone();
            minus[k] -= h;
            g.set_value(leaf, minus)?;
            let f_minus = g.forward_eval(root)?[0];
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let abs = (analytic[k] - numeric).abs();
            let scale = analytic[k].abs().max(numeric.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if abs > abs_tol {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= rel_tol {
                    report.failures += 1;
                }
            }
        }
        g.set_value(leaf, base)?;
    }
    g.forward_eval(root)?;
    Ok(report)
}

/// [`check`] with the default step and tolerances.
pub fn check_default(g: &mut Graph, root: Tensor, leaves: &[Tensor]) -> Result<GradCheckReport> {
    check(g, root, leaves, DEFAULT_STEP, DEFAULT_REL_TOL, DEFAULT_ABS_TOL)
}

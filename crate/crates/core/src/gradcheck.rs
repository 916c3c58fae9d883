//! Central-difference gradient checking against the autodiff tape.

use crate::error::Result;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Default relative-error tolerance for gradient agreement.
pub const FD_TOL: f64 = 1e-5;
/// Denominator floor: below this magnitude the comparison degrades to an
/// absolute check, guarding against finite-difference roundoff noise on
/// near-zero gradient entries.
pub const FD_FLOOR: f64 = 1e-3;

/// Relative error with a floored denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Central finite differences of a scalar function at `x`.
pub fn central_diff<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Max relative error between an analytic and a numeric gradient.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Check an autodiff gradient against central differences of `f` at `x`.
/// Returns the max relative error.
pub fn check_grad<F>(f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let numeric = central_diff(f, x, h)?;
    Ok(max_rel_err(analytic, &numeric))
}

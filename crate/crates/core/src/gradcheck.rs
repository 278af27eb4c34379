//! Central-finite-difference verification of tape gradients.
//!
//! The checker is deliberately independent of the tape: it only ever probes
//! a value closure at perturbed parameter vectors and compares against an
//! analytic gradient supplied separately.

use crate::error::{Error, Result};

/// Worst coordinate of a gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max_i |analytic_i - central_i| / max(1e-12, |central_i|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub central_at_worst: f64,
}

/// Central differences of a scalar function at `theta`.
pub fn central_difference_grad<F>(f: F, theta: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        let plus = f(&probe)?;
        probe[i] = theta[i] - step;
        let minus = f(&probe)?;
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Domain(format!(
                "finite-difference probe at coordinate {i} returned non-finite value"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Compare an analytic gradient against central differences.
pub fn compare_gradients(analytic: &[f64], central: &[f64]) -> Result<GradCheckReport> {
    if analytic.len() != central.len() {
        return Err(Error::Shape(format!(
            "gradient lengths differ: {} vs {}",
            analytic.len(),
            central.len()
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        central_at_worst: 0.0,
    };
    for (i, (&a, &c)) in analytic.iter().zip(central).enumerate() {
        let rel = (a - c).abs() / c.abs().max(1e-12);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.central_at_worst = c;
        }
    }
    Ok(report)
}

/// Full check: analytic gradient from `grad`, numeric gradient from probing
/// `value`, reported as the maximum per-coordinate relative error.
pub fn finite_difference_check<F, G>(
    value: F,
    grad: G,
    theta: &[f64],
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let analytic = grad(theta)?;
    if analytic.len() != theta.len() {
        return Err(Error::Shape(format!(
            "analytic gradient has {} coordinates, parameters have {}",
            analytic.len(),
            theta.len()
        )));
    }
    let central = central_difference_grad(value, theta, step)?;
    compare_gradients(&analytic, &central)
}

//! Central-difference gradient probes used by the test suites.
//!
//! These only ever call forward evaluations, so they stay independent of the
//! backward implementations they are used to check.

/// Central difference d f / d x at `x0` with a curvature-friendly step.
pub fn numeric_grad(mut f: impl FnMut(f64) -> f64, x0: f64) -> f64 {
    let h = 1e-5 * x0.abs().max(1.0);
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// Symmetric relative error, safe near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = (a.abs() + b.abs()).max(1e-8);
    (a - b).abs() / denom
}

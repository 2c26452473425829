use alloc::vec::Vec;

use crate::error::{bail, ensure, Result};
use crate::numerics::DenseArray;

/// A scalar function of a parameter set, evaluable with and without gradients.
pub trait ScalarObjective {
    fn value(&mut self, params: &[DenseArray<f64>]) -> Result<f64>;
    fn value_and_grad(&mut self, params: &[DenseArray<f64>]) -> Result<(f64, Vec<DenseArray<f64>>)>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(param index, flat index)` where the worst error occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares analytic gradients against central finite differences on every
/// coordinate. The relative error denominator is `max(|analytic|, |numeric|, 1e-8)`,
/// so coordinates where both gradients vanish score 0.
pub fn gradient_check<F: ScalarObjective>(
    objective: &mut F,
    params: &[DenseArray<f64>],
    epsilon: f64,
) -> Result<GradCheckReport> {
    ensure!(epsilon > 0.0, Argument, "epsilon must be positive");
    let (f0, analytic) = objective.value_and_grad(params)?;
    ensure!(f0.is_finite(), Numeric, "objective is not finite: {}", f0);
    ensure!(analytic.len() == params.len(), Shape, "{} grads for {} params", analytic.len(), params.len());
    let mut work: Vec<DenseArray<f64>> = params.to_vec();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst: (0, 0), coordinates: 0 };
    for pi in 0..params.len() {
        ensure!(analytic[pi].len() == params[pi].len(), Shape, "grad {} has wrong size", pi);
        for ci in 0..params[pi].len() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + epsilon;
            let fp = objective.value(&work)?;
            work[pi].data_mut()[ci] = orig - epsilon;
            let fm = objective.value(&work)?;
            work[pi].data_mut()[ci] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                bail!(Numeric, "objective not finite at param {} coord {}", pi, ci);
            }
            let numeric = (fp - fm) / (2.0 * epsilon);
            let a = analytic[pi].data()[ci];
            let den = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / den;
            report.coordinates += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (pi, ci);
            }
        }
    }
    Ok(report)
}

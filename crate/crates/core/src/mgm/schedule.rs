use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::RngStream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleShape {
    /// `γ(t) = sin(πt / 2T)`
    #[default]
    Sine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Schedule horizon `T`.
    pub horizon: f64,
    /// Number of decoding steps `S`.
    pub steps: usize,
    pub shape: ScheduleShape,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { horizon: 1.0, steps: 16, shape: ScheduleShape::Sine }
    }
}

impl ScheduleConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self { steps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, Argument, "schedule needs at least one step");
        ensure!(self.horizon > 0.0 && self.horizon.is_finite(), Argument, "schedule horizon must be positive");
        Ok(())
    }

    pub fn fraction(&self, t: f64) -> Result<f64> {
        match self.shape {
            ScheduleShape::Sine => mask_fraction(t, self.horizon),
        }
    }
}

/// Fraction of positions masked at schedule time `t ∈ [0, T]`.
pub fn mask_fraction(t: f64, horizon: f64) -> Result<f64> {
    ensure!(horizon > 0.0, Domain, "horizon must be positive, got {}", horizon);
    ensure!((0.0..=horizon).contains(&t), Domain, "t = {} outside [0, {}]", t, horizon);
    Ok(libm::sin(core::f64::consts::PI * t / (2.0 * horizon)))
}

/// `⌊x⌋`, snapping values within rounding noise of an integer onto it so the
/// count matches exact arithmetic (e.g. `10 · sin(π/6)` is exactly 5).
fn exact_floor(x: f64) -> usize {
    let r = libm::round(x);
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r.max(0.0) as usize
    } else {
        libm::floor(x).max(0.0) as usize
    }
}

/// Number of positions to remask after decoding step `j` of `S`:
/// `⌊n · γ(T − j·T/S)⌋`. `n` counts only non-prompt positions.
pub fn remask_count(n: usize, j: usize, cfg: &ScheduleConfig) -> Result<usize> {
    cfg.validate()?;
    ensure!(j >= 1 && j <= cfg.steps, Domain, "step {} outside 1..={}", j, cfg.steps);
    if j == cfg.steps {
        return Ok(0);
    }
    let t = cfg.horizon - j as f64 * cfg.horizon / cfg.steps as f64;
    let frac = cfg.fraction(t.max(0.0))?;
    Ok(exact_floor(n as f64 * frac).min(n))
}

/// Independent Bernoulli(`fraction`) mask of length `n`.
pub fn sample_mask(n: usize, fraction: f64, rng: &mut RngStream) -> Vec<bool> {
    (0..n).map(|_| rng.uniform() < fraction).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn fraction_values() {
        assert_eq!(mask_fraction(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(mask_fraction(0.0, 1.0).unwrap(), 0.0);
        assert!((mask_fraction(0.5, 1.0).unwrap() - 0.70711).abs() < 1e-5);
        assert!((mask_fraction(1.5, 3.0).unwrap() - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(mask_fraction(1.1, 1.0), Err(Error::Domain(_))));
        assert!(matches!(mask_fraction(-0.1, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn remask_table() {
        let s = ScheduleConfig::with_steps(4);
        let got: Vec<usize> = (1..=4).map(|j| remask_count(10, j, &s).unwrap()).collect();
        assert_eq!(got, [9, 7, 3, 0]);
    }

    #[test]
    fn remask_boundaries() {
        for n in [0, 1, 7, 64, 1000] {
            for steps in 1..=16 {
                assert_eq!(remask_count(n, steps, &ScheduleConfig::with_steps(steps)).unwrap(), 0);
            }
        }
        assert_eq!(remask_count(10, 1, &ScheduleConfig::with_steps(1)).unwrap(), 0);
        assert!(remask_count(10, 0, &ScheduleConfig::with_steps(4)).is_err());
        assert!(remask_count(10, 5, &ScheduleConfig::with_steps(4)).is_err());
    }

    #[test]
    fn remask_snaps_exact_integers() {
        // 10 · γ(1/3) = 10 · sin(π/6) = 5 exactly.
        assert_eq!(remask_count(10, 2, &ScheduleConfig::with_steps(3)).unwrap(), 5);
    }

    #[test]
    fn mask_extremes_and_rate() {
        let mut rng = RngStream::new(5);
        assert!(sample_mask(50, 1.0, &mut rng).iter().all(|&m| m));
        assert!(sample_mask(50, 0.0, &mut rng).iter().all(|&m| !m));
        let m = sample_mask(100_000, 0.3, &mut rng);
        let rate = m.iter().filter(|&&b| b).count() as f64 / m.len() as f64;
        assert!((rate - 0.3).abs() < 0.01, "{rate}");
    }
}

//! Small statistics helpers: sample means with standard errors and Wilson
//! intervals for proportions.

use serde::{Deserialize, Serialize};

use crate::scalar::{det_mean, det_sum_by, Scalar};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;
/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.575_829_303_548_901;

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0 }
    }

    pub fn of<T: Scalar>(values: &[T]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                value: f64::NAN,
                stderr: f64::NAN,
            };
        }
        let m = det_mean(values);
        let se = if n > 1 {
            let ss = det_sum_by(n, |p| (values[p] - m).powi(2));
            (ss / T::from_usize_lossy(n - 1) / T::from_usize_lossy(n)).sqrt()
        } else {
            T::zero()
        };
        Self {
            value: m.as_f64(),
            stderr: se.as_f64(),
        }
    }

    /// `value +- z * stderr`.
    pub fn interval(&self, z: f64) -> (f64, f64) {
        (self.value - z * self.stderr, self.value + z * self.stderr)
    }

    /// Distance to `target` in standard errors.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.value - target) / self.stderr
    }
}

/// Estimated proportion with a Wilson score interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub hits: u64,
    pub trials: u64,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Proportion {
    pub fn wilson(hits: u64, trials: u64, z: f64) -> Self {
        let (lower, upper) = wilson_interval(hits, trials, z);
        let estimate = if trials == 0 {
            f64::NAN
        } else {
            hits as f64 / trials as f64
        };
        Self {
            hits,
            trials,
            estimate,
            lower,
            upper,
        }
    }
}

/// Wilson score interval for `hits` successes in `trials`.
pub fn wilson_interval(hits: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if hits == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if hits == trials { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_reference_values() {
        // 10 of 100 at 95%: reference interval (0.0552, 0.1744)
        let (lo, hi) = wilson_interval(10, 100, Z95);
        assert!((lo - 0.05522).abs() < 1e-4, "{lo}");
        assert!((hi - 0.17436).abs() < 1e-4, "{hi}");
        let (lo, hi) = wilson_interval(0, 1000, Z95);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.004);
        assert_eq!(wilson_interval(5, 5, Z95).1, 1.0);
    }

    #[test]
    fn estimate_of_values() {
        let e = Estimate::of(&[1.0f64, 2.0, 3.0, 4.0]);
        assert_eq!(e.value, 2.5);
        assert!((e.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(Estimate::exact(2.0).interval(Z95), (2.0, 2.0));
    }
}

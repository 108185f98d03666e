//! Picard iteration with regression estimates of the conditional
//! expectations, the analytic contraction factor, and weighted norms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::delay::DelayMeasure;
use crate::error::{invalid, Result};
use crate::generator::Generator;
use crate::grid::PathEnsemble;
use crate::lsmc::{martingale_representation, GridSolution, RegressionBasis};
use crate::scalar::{det_mean, det_sum_by, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig<T> {
    /// Stop once the sup over steps of the mean square change of both `Y`
    /// and `Z` is at most this.
    pub tolerance: T,
    pub max_iterations: usize,
    pub degree: usize,
    /// Consecutive non-decreasing iterations that count as divergence.
    pub divergence_window: usize,
    /// Weight of the norms; the optimal contraction weight when `None`.
    pub beta: Option<T>,
}

impl<T: Scalar> Default for SolverConfig<T> {
    fn default() -> Self {
        Self {
            tolerance: T::lit(1e-12),
            max_iterations: 60,
            degree: 3,
            divergence_window: 3,
            beta: None,
        }
    }
}

impl<T: Scalar> SolverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > T::zero()) {
            return Err(invalid("tolerance must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations must be at least 1"));
        }
        if self.divergence_window < 2 {
            return Err(invalid("divergence window must be at least 2"));
        }
        if self.degree == 0 {
            return Err(invalid("basis degree must be at least 1"));
        }
        if let Some(b) = self.beta {
            if !(b >= T::zero()) {
                return Err(invalid("beta must be nonnegative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceVerdict {
    Converged,
    Diverged,
    MaxIterations,
}

/// Change between two consecutive iterates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Squared weighted sup norm of the `Y` change.
    pub y_norm_sq: f64,
    /// Squared weighted integral norm of the `Z` change.
    pub z_norm_sq: f64,
    /// Sup over steps of the mean square change of `Y`.
    pub y_mean_square: f64,
    pub z_mean_square: f64,
    /// Path mean of the new iterate at time zero.
    pub y0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub verdict: ConvergenceVerdict,
    pub iterations: usize,
    pub records: Vec<IterationRecord>,
    /// Ratios of combined squared norms of consecutive changes, from the
    /// second change on.
    pub ratios: Vec<f64>,
    pub beta: f64,
    pub beta_star: f64,
    pub delta_bound: f64,
    pub regularized_fits: usize,
}

impl ConvergenceReport {
    pub fn y0_trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y0).collect()
    }

    pub fn max_ratio(&self) -> Option<f64> {
        self.ratios.iter().copied().reduce(f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct PicardOutcome<T> {
    pub solution: GridSolution<T>,
    pub report: ConvergenceReport,
}

/// `delta(T, K, beta, alpha) = (8T + 1/beta) K int e^{-beta u} alpha(du) max(1, T)`.
pub fn contraction_bound<T: Scalar>(horizon: T, k: T, beta: T, measure: &DelayMeasure<T>) -> Result<T> {
    if !(beta > T::zero()) {
        return Err(invalid(format!("beta must be positive, got {beta}")));
    }
    if k < T::zero() || horizon < T::zero() {
        return Err(invalid("horizon and K must be nonnegative"));
    }
    if k == T::zero() {
        return Ok(T::zero());
    }
    let mass = measure.exp_weighted_mass(beta)?;
    Ok((T::lit(8.0) * horizon + T::one() / beta) * k * mass * horizon.max(T::one()))
}

/// Factor for generators that do not depend on `y`:
/// `(K / beta) int e^{-beta u} alpha(du)`.
pub fn contraction_bound_y_independent<T: Scalar>(k: T, beta: T, measure: &DelayMeasure<T>) -> Result<T> {
    if !(beta > T::zero()) {
        return Err(invalid(format!("beta must be positive, got {beta}")));
    }
    Ok(k / beta * measure.exp_weighted_mass(beta)?)
}

/// Upper bound `K e^{beta gamma} / beta` of the factor above, with `gamma`
/// the largest delay carrying mass.
pub fn short_delay_bound<T: Scalar>(k: T, beta: T, measure: &DelayMeasure<T>) -> Result<T> {
    if !(beta > T::zero()) {
        return Err(invalid(format!("beta must be positive, got {beta}")));
    }
    Ok(k * (beta * measure.max_delay()).exp() / beta)
}

/// Minimizes the contraction factor over `beta`: log-spaced scan over
/// `[1e-4/T, 1e6/T]` refined by golden section. Never worse than `beta = 1/T`.
pub fn optimize_beta<T: Scalar>(horizon: T, k: T, measure: &DelayMeasure<T>) -> Result<(T, T)> {
    if !(horizon > T::zero()) {
        return Err(invalid("horizon must be positive"));
    }
    let reference = T::one() / horizon;
    if k == T::zero() {
        return Ok((reference, T::zero()));
    }
    let delta = |lb: f64| -> f64 {
        let b = T::lit(lb.exp());
        contraction_bound(horizon, k, b, measure)
            .map(|d| d.as_f64())
            .ok()
            .filter(|d| d.is_finite())
            .unwrap_or(f64::INFINITY)
    };
    let lo = (1e-4 / horizon.as_f64()).ln();
    let hi = (1e6 / horizon.as_f64()).ln();
    let count = 401;
    let xs: Vec<f64> = (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect();
    let vals: Vec<f64> = xs.iter().map(|&x| delta(x)).collect();
    let best = (0..count)
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .unwrap_or(0);
    let (mut a, mut b) = (xs[best.saturating_sub(1)], xs[(best + 1).min(count - 1)]);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (delta(c), delta(d));
    for _ in 0..100 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = delta(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = delta(d);
        }
    }
    let mut cands = vec![(xs[best], vals[best]), (c, fc), (d, fd)];
    cands.push((reference.as_f64().ln(), delta(reference.as_f64().ln())));
    let (x, _) = cands
        .into_iter()
        .min_by(|p, q| p.1.total_cmp(&q.1))
        .unwrap_or((reference.as_f64().ln(), f64::INFINITY));
    let beta = T::lit(x.exp());
    // evaluate in the caller's precision
    let value = contraction_bound(horizon, k, beta, measure)?;
    Ok((beta, value))
}

/// Squared discrete norms of a difference of iterates:
/// `mean_p max_i e^{beta t_i} dY_i^2` and `mean_p sum_i e^{beta t_i} dZ_i^2 dt`.
/// `beta = 0` gives the unweighted norms.
pub fn weighted_norms<T: Scalar>(diff: &GridSolution<T>, beta: T) -> (T, T) {
    let grid = diff.grid();
    let n = grid.steps();
    let np = diff.n_paths();
    let dt = grid.dt();
    let w: Vec<T> = (0..=n).map(|i| (beta * grid.time(i)).exp()).collect();
    let y = diff.y();
    let z = diff.z();
    let s = det_sum_by(np, |p| {
        (0..=n).fold(T::zero(), |m, i| m.max(w[i] * y[i * np + p].powi(2)))
    });
    let h = det_sum_by(np, |p| {
        (0..n).fold(T::zero(), |m, i| m + w[i] * z[i * np + p].powi(2) * dt)
    });
    let npf = T::from_usize_lossy(np);
    (s / npf, h / npf)
}

fn sup_mean_square<T: Scalar>(values: &[T], rows: usize, np: usize) -> T {
    (0..rows)
        .map(|i| {
            let r = &values[i * np..(i + 1) * np];
            det_sum_by(np, |p| r[p].powi(2)) / T::from_usize_lossy(np)
        })
        .fold(T::zero(), T::max)
}

/// One application of the Picard map.
pub fn picard_step<T: Scalar>(
    gen: &Generator<T>,
    terminal: &[T],
    ensemble: &PathEnsemble<T>,
    basis: &RegressionBasis<T>,
    prev: &GridSolution<T>,
) -> Result<(GridSolution<T>, usize)> {
    let grid = *ensemble.grid();
    let n = grid.steps();
    let np = ensemble.n_paths();
    let dt = grid.dt();
    let weights = gen.grid_weights(&grid)?;
    let f = gen.fill(prev, &weights)?;

    // F_i = dt sum_{m<i} f_m
    let mut integral = vec![T::zero(); (n + 1) * np];
    for i in 0..n {
        let (done, rest) = integral.split_at_mut((i + 1) * np);
        let prev_row = &done[i * np..];
        let fi = &f[i * np..(i + 1) * np];
        rest[..np]
            .par_iter_mut()
            .enumerate()
            .for_each(|(p, x)| *x = prev_row[p] + fi[p] * dt);
    }
    let total: Vec<T> = (0..np)
        .into_par_iter()
        .map(|p| terminal[p] + integral[n * np + p])
        .collect();
    let rep = martingale_representation(ensemble, &total, basis)?;
    let mut y: Vec<T> = rep
        .martingale
        .par_iter()
        .zip(integral.par_iter())
        .map(|(&m, &s)| m - s)
        .collect();
    y[n * np..].copy_from_slice(terminal);
    Ok((GridSolution::new(grid, np, y, rep.z)?, rep.regularized))
}

/// Picard iteration from `Y = Z = 0`.
pub fn picard_solve<T: Scalar>(
    gen: &Generator<T>,
    terminal: &[T],
    ensemble: &PathEnsemble<T>,
    cfg: &SolverConfig<T>,
) -> Result<PicardOutcome<T>> {
    let basis = RegressionBasis::polynomial(cfg.degree)?;
    let init = GridSolution::zeros(*ensemble.grid(), ensemble.n_paths());
    picard_solve_from(gen, terminal, ensemble, cfg, &basis, init)
}

/// Picard iteration from a given initial iterate.
pub fn picard_solve_from<T: Scalar>(
    gen: &Generator<T>,
    terminal: &[T],
    ensemble: &PathEnsemble<T>,
    cfg: &SolverConfig<T>,
    basis: &RegressionBasis<T>,
    init: GridSolution<T>,
) -> Result<PicardOutcome<T>> {
    cfg.validate()?;
    let grid = *ensemble.grid();
    let np = ensemble.n_paths();
    let n = grid.steps();
    if terminal.len() != np {
        return Err(invalid("terminal values do not match the ensemble"));
    }
    if terminal.par_iter().any(|x| !x.is_finite()) {
        return Err(invalid("terminal values must be finite"));
    }
    if init.n_paths() != np || init.grid().steps() != n {
        return Err(invalid("initial iterate does not match the ensemble"));
    }

    let horizon = grid.horizon();
    let k = gen.lipschitz_constant();
    let measure = gen.measure();
    let (beta_star, delta_star) = optimize_beta(horizon, k, &measure)?;
    let beta = cfg.beta.unwrap_or(beta_star);

    let mut current = init;
    let mut records = Vec::new();
    let mut ratios = Vec::new();
    let mut regularized_fits = 0;
    let mut growth = 0;
    let mut prev_combined: Option<f64> = None;
    let mut verdict = ConvergenceVerdict::MaxIterations;

    for it in 1..=cfg.max_iterations {
        let (next, reg) = picard_step(gen, terminal, ensemble, basis, &current)?;
        regularized_fits += reg;
        let diff = next.difference(&current)?;
        let (ys, zs) = weighted_norms(&diff, beta);
        let yms = sup_mean_square(diff.y(), n + 1, np);
        let zms = sup_mean_square(diff.z(), n, np);
        records.push(IterationRecord {
            iteration: it,
            y_norm_sq: ys.as_f64(),
            z_norm_sq: zs.as_f64(),
            y_mean_square: yms.as_f64(),
            z_mean_square: zms.as_f64(),
            y0: det_mean(next.y_at(0)).as_f64(),
        });
        current = next;

        if !current.is_finite() {
            verdict = ConvergenceVerdict::Diverged;
            break;
        }
        if yms.max(zms) <= cfg.tolerance {
            verdict = ConvergenceVerdict::Converged;
            break;
        }
        let combined = (ys + zs).as_f64();
        if let Some(p) = prev_combined {
            if p > 0.0 {
                ratios.push(combined / p);
            }
            if combined >= p * (1.0 - 1e-9) {
                growth += 1;
            } else {
                growth = 0;
            }
            if growth >= cfg.divergence_window {
                verdict = ConvergenceVerdict::Diverged;
                break;
            }
        }
        prev_combined = Some(combined);
    }

    let report = ConvergenceReport {
        verdict,
        iterations: records.len(),
        records,
        ratios,
        beta: beta.as_f64(),
        beta_star: beta_star.as_f64(),
        delta_bound: delta_star.as_f64(),
        regularized_fits,
    };
    Ok(PicardOutcome {
        solution: current,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;

    #[test]
    fn bound_for_dirac_at_horizon() {
        for &(t, k) in &[(1.0f64, 0.3), (0.5, 2.0), (2.0, 0.1)] {
            let a = DelayMeasure::dirac(t, t).unwrap();
            let d = contraction_bound(t, k, 1.0 / t, &a).unwrap();
            let expect = 9.0 * t * k * std::f64::consts::E * t.max(1.0);
            assert!(((d - expect) / expect).abs() < 1e-12);
        }
        let a = DelayMeasure::dirac(1.0, 0.0).unwrap();
        assert_eq!(contraction_bound(1.0, 0.0, 2.0, &a).unwrap(), 0.0);
        assert!(contraction_bound(1.0, 1.0, 0.0, &a).is_err());
    }

    #[test]
    fn optimize_dirac_at_zero_reaches_limit() {
        let a = DelayMeasure::<f64>::dirac(1.0, 0.0).unwrap();
        let (_, d) = optimize_beta(1.0, 1.0, &a).unwrap();
        assert!((d - 8.0).abs() / 8.0 < 0.01);
        let (b, d) = optimize_beta(1.0, 0.0, &a).unwrap();
        assert_eq!((b, d), (1.0, 0.0));
    }

    #[test]
    fn y_independent_bounds() {
        let a = DelayMeasure::dirac(1.0, 0.2).unwrap();
        let d = contraction_bound_y_independent(0.5, 2.0, &a).unwrap();
        let u = short_delay_bound(0.5, 2.0, &a).unwrap();
        assert!((d - 0.25 * (0.4f64).exp()).abs() < 1e-15);
        assert!(d <= u * (1.0 + 1e-15));
    }

    #[test]
    fn norms_of_constant_difference() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let d = GridSolution::new(g, 3, vec![0.5; 15], vec![0.0; 12]).unwrap();
        let (s, h) = weighted_norms(&d, 0.0);
        assert_eq!(s, 0.25);
        assert_eq!(h, 0.0);
        let (s2, _) = weighted_norms(&d, 2.0);
        assert!((s2 - 0.25 * 2f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = SolverConfig::<f64>::default();
        assert!(c.validate().is_ok());
        c.divergence_window = 1;
        assert!(c.validate().is_err());
    }
}

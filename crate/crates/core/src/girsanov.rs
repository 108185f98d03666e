//! Change of measure for bounded step drifts: density processes, weighted
//! expectations and simulation under the shifted measure.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::delay::{DelayMeasure, GridWeights};
use crate::error::{invalid, Result};
use crate::generator::GFunction;
use crate::grid::{simulate_paths, PathEnsemble, TimeGrid};
use crate::scalar::Scalar;
use crate::stats::Estimate;

/// Drift `theta(t_i)` per step `i < N`, constant on each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec<T> {
    values: Vec<T>,
}

impl<T: Scalar> DriftSpec<T> {
    pub fn from_values(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(invalid("drift must be bounded"));
        }
        Ok(Self { values })
    }

    pub fn constant(value: T, steps: usize) -> Result<Self> {
        Self::from_values(vec![value; steps])
    }

    /// `theta(t_i) = alpha((t_i - T, 0]) g(t_i)` with the exact tail mass at
    /// the left end of each step.
    pub fn from_measure(measure: &DelayMeasure<T>, g: &GFunction<T>, grid: &TimeGrid<T>) -> Result<Self> {
        let values = (0..grid.steps())
            .map(|i| Ok(measure.tail_mass(grid.time(i), T::zero())? * g.value(i)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_values(values)
    }

    /// Drift of the discrete scheme: `theta_m = g_m sum_{j <= N-1-m} w_j`,
    /// the total weight with which `Z_m` enters later generator values.
    pub fn linear_delay(weights: &GridWeights<T>, g: &GFunction<T>) -> Result<Self> {
        let n = weights.grid().steps();
        Self::from_values((0..n).map(|m| g.value(m) * weights.tail(m)).collect())
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn bound(&self) -> T {
        self.values.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// `sum_i theta_i dt` up to each step.
    pub fn cumulative(&self, dt: T) -> Vec<T> {
        let mut out = Vec::with_capacity(self.values.len() + 1);
        let mut acc = T::zero();
        out.push(acc);
        for &v in &self.values {
            acc += v * dt;
            out.push(acc);
        }
        out
    }
}

/// Density process `exp(sum theta dW - 1/2 sum theta^2 dt)` per path, stored
/// as logarithms, time-major on steps `0..=N`.
#[derive(Debug, Clone)]
pub struct DensityPath<T> {
    n_paths: usize,
    steps: usize,
    log: Vec<T>,
}

impl<T: Scalar> DensityPath<T> {
    pub fn log_at(&self, step: usize) -> &[T] {
        &self.log[step * self.n_paths..(step + 1) * self.n_paths]
    }

    pub fn values_at(&self, step: usize) -> Vec<T> {
        self.log_at(step).par_iter().map(|x| x.exp()).collect()
    }

    pub fn terminal(&self) -> Vec<T> {
        self.values_at(self.steps)
    }
}

/// Density of the shifted measure on a driftless ensemble.
pub fn density<T: Scalar>(ensemble: &PathEnsemble<T>, drift: &DriftSpec<T>) -> Result<DensityPath<T>> {
    if ensemble.has_drift() {
        return Err(invalid("density needs an ensemble simulated without drift"));
    }
    let n = ensemble.grid().steps();
    if drift.values.len() != n {
        return Err(invalid(format!(
            "drift has {} steps, grid has {}",
            drift.values.len(),
            n
        )));
    }
    let np = ensemble.n_paths();
    let dt = ensemble.grid().dt();
    let half = T::lit(0.5);
    let mut log = vec![T::zero(); (n + 1) * np];
    for i in 0..n {
        let th = drift.values[i];
        let comp = half * th * th * dt;
        let dw = ensemble.increments_at(i);
        let (done, rest) = log.split_at_mut((i + 1) * np);
        let prev = &done[i * np..];
        rest[..np]
            .par_iter_mut()
            .enumerate()
            .for_each(|(p, l)| *l = prev[p] + (th * dw[p] - comp));
    }
    Ok(DensityPath {
        n_paths: np,
        steps: n,
        log,
    })
}

/// Density-weighted sample mean of terminal payoffs.
pub fn q_expectation<T: Scalar>(payoff: &[T], density: &DensityPath<T>) -> Result<Estimate> {
    if payoff.len() != density.n_paths {
        return Err(invalid("payoff does not match the density"));
    }
    let d = density.terminal();
    let weighted: Vec<T> = payoff.par_iter().zip(d.par_iter()).map(|(&x, &w)| x * w).collect();
    Ok(Estimate::of(&weighted))
}

/// Paths of `W` under the shifted measure: `W = W^Q + int theta dt`.
pub fn q_shifted_ensemble<T: Scalar>(
    grid: &TimeGrid<T>,
    n_paths: usize,
    seed: u64,
    drift: &DriftSpec<T>,
) -> Result<PathEnsemble<T>> {
    simulate_paths(grid, n_paths, seed, Some(drift.values()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_drift_density_is_one() {
        let g = TimeGrid::new(1.0, 5).unwrap();
        let e = simulate_paths(&g, 100, 1, None).unwrap();
        let d = density(&e, &DriftSpec::constant(0.0, 5).unwrap()).unwrap();
        assert!(d.terminal().iter().all(|&x| x == 1.0));
        assert!(d.values_at(0).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn exponent_offset_of_linear_drift() {
        // theta = K (T - s) at left endpoints: 1/2 sum theta^2 dt -> K^2 T^3 / 6
        let n = 4000;
        let g = TimeGrid::new(1.0, n).unwrap();
        let k = 0.5;
        let th = DriftSpec::from_measure(
            &DelayMeasure::uniform(1.0).unwrap(),
            &GFunction::Constant(k),
            &g,
        )
        .unwrap();
        let dt = g.dt();
        let half: f64 = th.values().iter().map(|x| 0.5 * x * x * dt).sum();
        assert!((half - k * k / 6.0).abs() < 1e-4);
    }

    #[test]
    fn rejects_drifted_ensemble() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        let dr = DriftSpec::constant(1.0, 3).unwrap();
        let e = q_shifted_ensemble(&g, 10, 1, &dr).unwrap();
        assert!(density(&e, &dr).is_err());
        assert!(DriftSpec::from_values(vec![f64::INFINITY]).is_err());
    }
}

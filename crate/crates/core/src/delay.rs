//! Delay measures on `[-T, 0]` and their grid discretization.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::TimeGrid;
use crate::scalar::Scalar;

/// Probability measure on `[-T, 0]`: finitely many atoms plus a uniform part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayMeasure<T> {
    horizon: T,
    /// `(u, w)` with lag `u` in `[-T, 0]` and weight `w > 0`.
    atoms: Vec<(T, T)>,
    uniform_weight: T,
}

impl<T: Scalar> DelayMeasure<T> {
    pub fn new(horizon: T, atoms: Vec<(T, T)>, uniform_weight: T) -> Result<Self> {
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(invalid("delay measure needs a positive horizon"));
        }
        if !(uniform_weight >= T::zero()) {
            return Err(invalid("uniform weight must be nonnegative"));
        }
        let mut total = uniform_weight;
        for &(u, w) in &atoms {
            if !(u <= T::zero() && u >= -horizon) {
                return Err(invalid(format!("atom lag {u} outside [-{horizon}, 0]")));
            }
            if !(w > T::zero()) {
                return Err(invalid(format!("atom weight {w} must be positive")));
            }
            total += w;
        }
        let tol = T::epsilon() * T::lit(64.0);
        if (total - T::one()).abs() > tol {
            return Err(invalid(format!("delay measure has total mass {total}, not 1")));
        }
        Ok(Self {
            horizon,
            atoms,
            uniform_weight,
        })
    }

    /// Point mass at lag `-delay`.
    pub fn dirac(horizon: T, delay: T) -> Result<Self> {
        Self::new(horizon, vec![(-delay, T::one())], T::zero())
    }

    /// Uniform distribution on `[-T, 0]`.
    pub fn uniform(horizon: T) -> Result<Self> {
        Self::new(horizon, Vec::new(), T::one())
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn atoms(&self) -> &[(T, T)] {
        &self.atoms
    }

    pub fn uniform_weight(&self) -> T {
        self.uniform_weight
    }

    /// Mass of the half-open lag interval `(a, b]` intersected with `[-T, 0]`.
    pub fn interval_mass(&self, a: T, b: T) -> T {
        let lo = a.max(-self.horizon);
        let hi = b.min(T::zero());
        let mut m = T::zero();
        if hi > lo {
            m += self.uniform_weight * (hi - lo) / self.horizon;
        }
        for &(u, w) in &self.atoms {
            if u > a && u <= b {
                m += w;
            }
        }
        m
    }

    /// `alpha((s - T, (s - t) ^ 0])` for `s, t` in `[0, T]`. With `t = 0` this
    /// is the full tail `alpha((s - T, 0])`; with `s <= t` it is the delay
    /// window between the current time `t` and the lag reaching back to `s`.
    pub fn tail_mass(&self, s: T, t: T) -> Result<T> {
        let horizon = self.horizon;
        let inside = |x: T| x >= T::zero() && x <= horizon;
        if !inside(s) || !inside(t) {
            return Err(invalid(format!(
                "tail_mass arguments ({s}, {t}) outside [0, {horizon}]"
            )));
        }
        Ok(self.interval_mass(s - horizon, (s - t).min(T::zero())))
    }

    /// `int e^{-beta u} alpha(du)`.
    pub fn exp_weighted_mass(&self, beta: T) -> Result<T> {
        if !(beta > T::zero()) {
            return Err(invalid(format!("beta must be positive, got {beta}")));
        }
        let mut m = T::zero();
        for &(u, w) in &self.atoms {
            m += w * (-beta * u).exp();
        }
        if self.uniform_weight > T::zero() {
            let x = beta * self.horizon;
            m += self.uniform_weight * x.exp_m1() / x;
        }
        Ok(m)
    }

    /// Largest delay carrying mass.
    pub fn max_delay(&self) -> T {
        let atoms = self
            .atoms
            .iter()
            .map(|&(u, _)| -u)
            .fold(T::zero(), T::max);
        if self.uniform_weight > T::zero() {
            self.horizon
        } else {
            atoms
        }
    }

    /// Weights per grid offset `j = 0..=N`.
    ///
    /// An atom at delay `r` goes to the nearest offset, ties to the smaller
    /// delay. The uniform part gets the step-averaged weights `1/(2N)` at
    /// offsets `0` and `N` and `1/N` in between: these reproduce the exact
    /// average over a step of the delay integral of a path that is constant
    /// between grid points. The weight at the last nonzero offset absorbs
    /// rounding so the total is one.
    pub fn discretize(&self, grid: &TimeGrid<T>) -> Result<GridWeights<T>> {
        let h = grid.horizon();
        let scale = (h - self.horizon).abs() / h;
        if scale > T::epsilon() * T::lit(16.0) {
            return Err(invalid(format!(
                "delay measure horizon {} differs from grid horizon {h}",
                self.horizon
            )));
        }
        let n = grid.steps();
        let nf = T::from_usize_lossy(n);
        let mut w = vec![T::zero(); n + 1];
        for &(u, wt) in &self.atoms {
            let x = -u * nf / h;
            let j = (x - T::lit(0.5)).ceil().max(T::zero()).to_usize().unwrap_or(0);
            w[j.min(n)] += wt;
        }
        let c = self.uniform_weight;
        if c > T::zero() {
            let half = c / (nf + nf);
            w[0] += half;
            w[n] += half;
            for x in w.iter_mut().take(n).skip(1) {
                *x += c / nf;
            }
        }
        if let Some(last) = w.iter().rposition(|&x| x > T::zero()) {
            let rest: T = w[..last].iter().copied().fold(T::zero(), |a, b| a + b);
            w[last] = T::one() - rest;
        }
        Ok(GridWeights { weights: w, grid: *grid })
    }
}

/// Discretized delay measure: weight per grid offset.
#[derive(Debug, Clone, PartialEq)]
pub struct GridWeights<T> {
    weights: Vec<T>,
    grid: TimeGrid<T>,
}

impl<T: Scalar> GridWeights<T> {
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn weight(&self, offset: usize) -> T {
        self.weights.get(offset).copied().unwrap_or_else(T::zero)
    }

    pub fn total(&self) -> T {
        self.weights.iter().copied().fold(T::zero(), |a, b| a + b)
    }

    /// Offsets with nonzero weight.
    pub fn support(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != T::zero())
            .map(|(j, &w)| (j, w))
    }

    /// Discrete `alpha((t_m - T, 0])`: total weight of offsets that stay inside
    /// the horizon when looking back from a step `i > m` to `m`,
    /// i.e. `sum_{j <= N-1-m} w_j`.
    pub fn tail(&self, m: usize) -> T {
        let n = self.grid.steps();
        if m >= n {
            return T::zero();
        }
        self.weights[..n - m].iter().copied().fold(T::zero(), |a, b| a + b)
    }

    /// Discrete `alpha((t_m - T, t_m - t_i])` for `m < i`: weight of offsets
    /// `i - m ..= N - 1 - m`.
    pub fn window(&self, m: usize, i: usize) -> T {
        let n = self.grid.steps();
        let lo = i.saturating_sub(m);
        if m >= n || lo > n - 1 - m {
            return T::zero();
        }
        self.weights[lo..n - m].iter().copied().fold(T::zero(), |a, b| a + b)
    }

    pub fn same_grid(&self, grid: &TimeGrid<T>) -> bool {
        self.grid.steps() == grid.steps() && self.grid.horizon() == grid.horizon()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(n: usize) -> TimeGrid<f64> {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn dirac_tail_mass() {
        let a = DelayMeasure::dirac(1.0, 0.25).unwrap();
        assert_eq!(a.tail_mass(0.5, 0.0).unwrap(), 1.0);
        assert_eq!(a.tail_mass(0.75, 0.0).unwrap(), 0.0);
        assert_eq!(a.tail_mass(0.875, 0.0).unwrap(), 0.0);
        // window (s - T, s - t]: atom at -0.25 is inside for t <= s + 0.25
        assert_eq!(a.tail_mass(0.25, 0.5).unwrap(), 1.0);
        assert_eq!(a.tail_mass(0.25, 0.625).unwrap(), 0.0);
        assert_eq!(a.tail_mass(1.0, 1.0).unwrap(), 0.0);
        assert!(a.tail_mass(1.2, 0.0).is_err());
    }

    #[test]
    fn uniform_tail_and_exp_mass() {
        let a = DelayMeasure::uniform(2.0).unwrap();
        assert_relative_eq!(a.tail_mass(0.5, 0.0).unwrap(), 0.75, epsilon = 1e-15);
        // window between s and t
        assert_relative_eq!(a.tail_mass(0.5, 1.5).unwrap(), 0.25, epsilon = 1e-15);
        assert_relative_eq!(
            a.exp_weighted_mass(0.5).unwrap(),
            std::f64::consts::E - 1.0,
            epsilon = 1e-14
        );
        let d = DelayMeasure::dirac(2.0, 2.0).unwrap();
        assert_relative_eq!(
            d.exp_weighted_mass(0.5).unwrap(),
            std::f64::consts::E,
            epsilon = 1e-14
        );
        assert_eq!(DelayMeasure::dirac(2.0, 0.0).unwrap().exp_weighted_mass(7.0).unwrap(), 1.0);
        assert!(a.exp_weighted_mass(0.0).is_err());
    }

    #[test]
    fn rejects_bad_measures() {
        assert!(DelayMeasure::new(1.0, vec![(0.5, 1.0)], 0.0).is_err());
        assert!(DelayMeasure::new(1.0, vec![(-0.5, 0.5)], 0.0).is_err());
        assert!(DelayMeasure::new(1.0, vec![(-0.5, -0.5)], 1.5).is_err());
        assert!(DelayMeasure::<f64>::dirac(1.0, 1.5).is_err());
    }

    #[test]
    fn discretize_dirac_and_ties() {
        let g = grid(10);
        let w = DelayMeasure::dirac(1.0, 1.0).unwrap().discretize(&g).unwrap();
        assert_eq!(w.weight(10), 1.0);
        assert_eq!(w.total(), 1.0);
        // delay 0.25 = 2.5 steps: tie goes to offset 2
        let w = DelayMeasure::dirac(1.0, 0.25).unwrap().discretize(&g).unwrap();
        assert_eq!(w.weight(2), 1.0);
        let w = DelayMeasure::dirac(1.0, 0.26).unwrap().discretize(&g).unwrap();
        assert_eq!(w.weight(3), 1.0);
    }

    #[test]
    fn discretize_uniform() {
        let g = grid(8);
        let w = DelayMeasure::uniform(1.0).unwrap().discretize(&g).unwrap();
        assert_eq!(w.weight(0), 1.0 / 16.0);
        assert_eq!(w.weight(8), 1.0 / 16.0);
        for j in 1..8 {
            assert_eq!(w.weight(j), 0.125);
        }
        assert_eq!(w.total(), 1.0);
        // discrete tail is the exact tail at the step midpoint
        for m in 0..8 {
            let exact = (8.0 - m as f64) / 8.0;
            assert!((w.tail(m) - exact).abs() <= 1.0 / 8.0);
            assert_relative_eq!(w.tail(m), exact - 1.0 / 16.0, epsilon = 1e-15);
        }
        assert!(DelayMeasure::uniform(2.0).unwrap().discretize(&g).is_err());
    }

    #[test]
    fn windows() {
        let g = grid(4);
        let w = DelayMeasure::dirac(1.0, 0.5).unwrap().discretize(&g).unwrap();
        // offset 2: Z_m influences f_{m+2} while m + 2 < 4
        assert_eq!(w.tail(0), 1.0);
        assert_eq!(w.tail(1), 1.0);
        assert_eq!(w.tail(2), 0.0);
        assert_eq!(w.window(0, 1), 1.0);
        assert_eq!(w.window(0, 2), 1.0);
        assert_eq!(w.window(0, 3), 0.0);
        assert_eq!(w.window(1, 4), 0.0);
    }

    #[test]
    fn f32_measure() {
        let a = DelayMeasure::<f32>::uniform(1.0).unwrap();
        let w = a.discretize(&TimeGrid::new(1.0f32, 5).unwrap()).unwrap();
        assert_eq!(w.total(), 1.0f32);
    }
}

//! Least-squares Monte Carlo: regression estimates of conditional
//! expectations, the numerical martingale representation and pathwise
//! residuals of candidate solutions.

use std::sync::Arc;

use rayon::prelude::*;

use crate::delay::GridWeights;
use crate::error::{invalid, Result};
use crate::generator::Generator;
use crate::grid::{PathEnsemble, TimeGrid};
use crate::scalar::{det_max_by, det_mean, det_sum, det_sum_by, Scalar, REDUCTION_CHUNK};

/// Solution values on every path, stored time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSolution<T> {
    grid: TimeGrid<T>,
    n_paths: usize,
    y: Vec<T>,
    z: Vec<T>,
}

impl<T: Scalar> GridSolution<T> {
    /// `y` has `(N + 1) * n_paths` entries and `z` has `N * n_paths`, both
    /// time-major.
    pub fn new(grid: TimeGrid<T>, n_paths: usize, y: Vec<T>, z: Vec<T>) -> Result<Self> {
        let n = grid.steps();
        if y.len() != (n + 1) * n_paths || z.len() != n * n_paths {
            return Err(invalid(format!(
                "solution arrays have lengths ({}, {}), expected ({}, {})",
                y.len(),
                z.len(),
                (n + 1) * n_paths,
                n * n_paths
            )));
        }
        Ok(Self { grid, n_paths, y, z })
    }

    pub fn zeros(grid: TimeGrid<T>, n_paths: usize) -> Self {
        let n = grid.steps();
        Self {
            grid,
            n_paths,
            y: vec![T::zero(); (n + 1) * n_paths],
            z: vec![T::zero(); n * n_paths],
        }
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn y(&self) -> &[T] {
        &self.y
    }

    pub fn z(&self) -> &[T] {
        &self.z
    }

    pub fn y_at(&self, step: usize) -> &[T] {
        &self.y[step * self.n_paths..(step + 1) * self.n_paths]
    }

    pub fn z_at(&self, step: usize) -> &[T] {
        &self.z[step * self.n_paths..(step + 1) * self.n_paths]
    }

    pub fn y_at_mut(&mut self, step: usize) -> &mut [T] {
        &mut self.y[step * self.n_paths..(step + 1) * self.n_paths]
    }

    pub fn z_at_mut(&mut self, step: usize) -> &mut [T] {
        &mut self.z[step * self.n_paths..(step + 1) * self.n_paths]
    }

    /// Y values of one path, steps `0..=N`.
    pub fn path_y(&self, path: usize) -> Vec<T> {
        (0..=self.grid.steps())
            .map(|i| self.y[i * self.n_paths + path])
            .collect()
    }

    /// Z values of one path, steps `0..N`.
    pub fn path_z(&self, path: usize) -> Vec<T> {
        (0..self.grid.steps())
            .map(|i| self.z[i * self.n_paths + path])
            .collect()
    }

    pub fn mean_y(&self, step: usize) -> T {
        det_mean(self.y_at(step))
    }

    pub fn mean_z(&self, step: usize) -> T {
        det_mean(self.z_at(step))
    }

    /// Standard error of the path mean of `Y(t_step)`.
    pub fn stderr_y(&self, step: usize) -> T {
        stderr(self.y_at(step))
    }

    /// Componentwise `self - other`.
    pub fn difference(&self, other: &Self) -> Result<Self> {
        if self.y.len() != other.y.len() || self.z.len() != other.z.len() {
            return Err(invalid("solutions live on different grids"));
        }
        let y = self.y.iter().zip(&other.y).map(|(&a, &b)| a - b).collect();
        let z = self.z.iter().zip(&other.z).map(|(&a, &b)| a - b).collect();
        Ok(Self {
            grid: self.grid,
            n_paths: self.n_paths,
            y,
            z,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.y.par_iter().chain(self.z.par_iter()).all(|x| x.is_finite())
    }
}

/// Standard error of the sample mean.
pub fn stderr<T: Scalar>(values: &[T]) -> T {
    let n = values.len();
    if n < 2 {
        return T::zero();
    }
    let m = det_mean(values);
    let ss = det_sum_by(n, |p| (values[p] - m).powi(2));
    (ss / T::from_usize_lossy(n - 1) / T::from_usize_lossy(n)).sqrt()
}

/// Half-width scale of regression error: `5 / sqrt(n_paths)`.
pub fn regression_tolerance(n_paths: usize) -> f64 {
    5.0 / (n_paths.max(1) as f64).sqrt()
}

/// Polynomial regression basis in `W(t_i)` and, optionally, one auxiliary
/// adapted state variable `X(t_i)`: all monomials of total degree at most
/// `degree`. The state is needed when the conditional expectation depends on
/// the path through more than the current Brownian value.
#[derive(Debug, Clone)]
pub struct RegressionBasis<T> {
    degree: usize,
    state: Option<Arc<Vec<T>>>,
}

impl<T: Scalar> RegressionBasis<T> {
    pub fn polynomial(degree: usize) -> Result<Self> {
        if degree == 0 {
            return Err(invalid("basis degree must be at least 1"));
        }
        Ok(Self {
            degree,
            state: None,
        })
    }

    /// Adds a state variable given time-major on steps `0..=N`.
    pub fn with_state(mut self, state: Vec<T>) -> Self {
        self.state = Some(Arc::new(state));
        self
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn has_state(&self) -> bool {
        self.state.is_some()
    }

    fn exponents(&self, vars: usize) -> Vec<(usize, usize)> {
        let d = self.degree;
        match vars {
            0 => vec![(0, 0)],
            1 => (0..=d).map(|k| (k, 0)).collect(),
            _ => {
                let mut out = Vec::new();
                for total in 0..=d {
                    for b in 0..=total {
                        out.push((total - b, b));
                    }
                }
                out
            }
        }
    }
}

impl<T: Scalar> Default for RegressionBasis<T> {
    fn default() -> Self {
        Self {
            degree: 3,
            state: None,
        }
    }
}

/// Fitted values of a regression, with a flag raised when the ridge fallback
/// was needed.
#[derive(Debug, Clone)]
pub struct Projection<T> {
    pub values: Vec<T>,
    pub regularized: bool,
}

struct Standardized<'a, T> {
    data: &'a [T],
    mean: T,
    inv_sd: T,
}

fn standardize<T: Scalar>(data: &[T]) -> Option<Standardized<'_, T>> {
    let mean = det_mean(data);
    let n = T::from_usize_lossy(data.len());
    let var = det_sum_by(data.len(), |p| (data[p] - mean).powi(2)) / n;
    let sd = var.sqrt();
    let scale = T::one() + mean.abs();
    if !(sd > scale * T::lit(1e-10)) {
        return None;
    }
    Some(Standardized {
        data,
        mean,
        inv_sd: T::one() / sd,
    })
}

/// Least-squares projection of `payoff` on the basis at step `step`
/// restricted to the paths where `mask` is true (all paths when `None`).
/// Fitted values are returned for every path.
pub fn project<T: Scalar>(
    ensemble: &PathEnsemble<T>,
    payoff: &[T],
    step: usize,
    basis: &RegressionBasis<T>,
    mask: Option<&[bool]>,
) -> Result<Projection<T>> {
    let np = ensemble.n_paths();
    if payoff.len() != np {
        return Err(invalid(format!(
            "payoff has {} values for {} paths",
            payoff.len(),
            np
        )));
    }
    if step > ensemble.grid().steps() {
        return Err(invalid(format!("step {step} beyond the grid")));
    }
    if payoff.par_iter().any(|x| !x.is_finite()) {
        return Err(invalid("payoff is not finite on every path"));
    }
    let active = |p: usize| mask.map_or(true, |m| m[p]);
    let count = det_sum_by(np, |p| if active(p) { T::one() } else { T::zero() });
    if count == T::zero() {
        return Ok(Projection {
            values: vec![T::zero(); np],
            regularized: false,
        });
    }

    // a constant payoff is its own conditional expectation
    let first = (0..np).find(|&p| active(p)).unwrap_or(0);
    let c = payoff[first];
    if (0..np).into_par_iter().all(|p| !active(p) || payoff[p] == c) {
        return Ok(Projection {
            values: vec![c; np],
            regularized: false,
        });
    }

    let mut vars: Vec<Standardized<'_, T>> = Vec::new();
    if let Some(v) = standardize(ensemble.brownian_at(step)) {
        vars.push(v);
    }
    if let Some(state) = &basis.state {
        let slice = &state[step * np..(step + 1) * np];
        if let Some(v) = standardize(slice) {
            vars.push(v);
        }
    }
    let exps = basis.exponents(vars.len());
    let k = exps.len();

    let features = |p: usize, out: &mut [T]| {
        let x = vars.first().map_or(T::zero(), |v| (v.data[p] - v.mean) * v.inv_sd);
        let y = vars.get(1).map_or(T::zero(), |v| (v.data[p] - v.mean) * v.inv_sd);
        for (f, &(a, b)) in out.iter_mut().zip(&exps) {
            *f = x.powi(a as i32) * y.powi(b as i32);
        }
    };

    // normal equations, chunked so the reduction order is fixed
    let chunks = np.div_ceil(REDUCTION_CHUNK);
    let partials: Vec<Vec<T>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![T::zero(); k * k + k];
            let mut phi = vec![T::zero(); k];
            let lo = c * REDUCTION_CHUNK;
            let hi = (lo + REDUCTION_CHUNK).min(np);
            for p in lo..hi {
                if !active(p) {
                    continue;
                }
                features(p, &mut phi);
                for a in 0..k {
                    for b in a..k {
                        acc[a * k + b] += phi[a] * phi[b];
                    }
                    acc[k * k + a] += phi[a] * payoff[p];
                }
            }
            acc
        })
        .collect();
    let mut acc = vec![T::zero(); k * k + k];
    for part in partials {
        for (a, b) in acc.iter_mut().zip(part) {
            *a += b;
        }
    }
    let mut gram = vec![T::zero(); k * k];
    for a in 0..k {
        for b in a..k {
            gram[a * k + b] = acc[a * k + b] / count;
            gram[b * k + a] = gram[a * k + b];
        }
    }
    let rhs: Vec<T> = acc[k * k..].iter().map(|&x| x / count).collect();

    let (coef, regularized) = solve_normal_equations(&gram, &rhs, k);
    let values: Vec<T> = (0..np)
        .into_par_iter()
        .map_init(
            || vec![T::zero(); k],
            |phi, p| {
                features(p, phi);
                phi.iter().zip(&coef).fold(T::zero(), |s, (&f, &c)| s + f * c)
            },
        )
        .collect();
    Ok(Projection {
        values,
        regularized,
    })
}

/// Cholesky solve, with a ridge term added when a pivot is too small.
fn solve_normal_equations<T: Scalar>(gram: &[T], rhs: &[T], k: usize) -> (Vec<T>, bool) {
    let trace: T = (0..k).map(|a| gram[a * k + a]).sum();
    let pivot_floor = trace * T::epsilon() * T::lit(1e4);
    if let Some(x) = cholesky_solve(gram, rhs, k, T::zero(), pivot_floor) {
        return (x, false);
    }
    let lambda = trace / T::from_usize_lossy(k) * T::lit(1e-10).max(T::epsilon() * T::lit(16.0));
    let x = cholesky_solve(gram, rhs, k, lambda, T::zero())
        .unwrap_or_else(|| {
            let mut x = vec![T::zero(); k];
            x[0] = rhs[0] / gram[0].max(T::min_positive_value());
            x
        });
    (x, true)
}

fn cholesky_solve<T: Scalar>(a: &[T], b: &[T], k: usize, ridge: T, floor: T) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i * k + j];
            if i == j {
                s += ridge;
            }
            for m in 0..j {
                s -= l[i * k + m] * l[j * k + m];
            }
            if i == j {
                if !(s > floor) || s <= T::zero() {
                    return None;
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    let mut y = vec![T::zero(); k];
    for i in 0..k {
        let mut s = b[i];
        for m in 0..i {
            s -= l[i * k + m] * y[m];
        }
        y[i] = s / l[i * k + i];
    }
    let mut x = vec![T::zero(); k];
    for i in (0..k).rev() {
        let mut s = y[i];
        for m in i + 1..k {
            s -= l[m * k + i] * x[m];
        }
        x[i] = s / l[i * k + i];
    }
    Some(x)
}

/// Regression estimate of `E[payoff | F_{t_step}]` on every path. At step 0
/// this is the sample mean.
pub fn conditional_expectation<T: Scalar>(
    ensemble: &PathEnsemble<T>,
    payoff: &[T],
    step: usize,
    basis: &RegressionBasis<T>,
) -> Result<Projection<T>> {
    project(ensemble, payoff, step, basis, None)
}

/// Numerical martingale representation of a terminal value under the
/// simulation measure of the ensemble.
#[derive(Debug, Clone)]
pub struct Representation<T> {
    /// `Z(t_i)`, time-major, steps `0..N`.
    pub z: Vec<T>,
    /// `mean + sum_{m < i} Z_m dW_m`, time-major, steps `0..=N`: the
    /// martingale rebuilt from the integrand. Its value at `N` differs from
    /// the terminal value by the unexplained residual.
    pub martingale: Vec<T>,
    /// Control-variate estimate of the mean of the terminal value.
    pub mean: T,
    /// Number of regressions that needed the ridge fallback.
    pub regularized: usize,
}

/// Estimates `Z` with `Z(t_i) = E[(M_{i+1} - M_i) dW_i | F_{t_i}] / dt`,
/// where `M_i` are regression estimates of the conditional expectations of
/// `terminal`, computed backward one step at a time. Increments are those of the Brownian motion under the
/// simulation measure.
pub fn martingale_representation<T: Scalar>(
    ensemble: &PathEnsemble<T>,
    terminal: &[T],
    basis: &RegressionBasis<T>,
) -> Result<Representation<T>> {
    let n = ensemble.grid().steps();
    let np = ensemble.n_paths();
    let dt = ensemble.grid().dt();
    if terminal.len() != np {
        return Err(invalid("terminal values do not match the ensemble"));
    }
    let mut regularized = 0;

    // backward recursion M_i = E[M_{i+1} | F_i]: each fit only sees the
    // one-step variation, which keeps the slope noise small at early times
    let mut cond: Vec<Vec<T>> = vec![Vec::new(); n + 1];
    cond[n] = terminal.to_vec();
    for i in (0..n).rev() {
        let proj = conditional_expectation(ensemble, &cond[i + 1], i, basis)?;
        regularized += usize::from(proj.regularized);
        cond[i] = proj.values;
    }

    let mut z = vec![T::zero(); n * np];
    for i in 0..n {
        let dw = ensemble.noise_at(i);
        let target: Vec<T> = (0..np)
            .into_par_iter()
            .map(|p| (cond[i + 1][p] - cond[i][p]) * dw[p])
            .collect();
        let proj = conditional_expectation(ensemble, &target, i, basis)?;
        regularized += usize::from(proj.regularized);
        z[i * np..(i + 1) * np]
            .par_iter_mut()
            .zip(proj.values.par_iter())
            .for_each(|(zi, &v)| *zi = v / dt);
    }
    drop(cond);

    let mut stoch = vec![T::zero(); (n + 1) * np];
    for i in 0..n {
        let dw = ensemble.noise_at(i);
        let (done, rest) = stoch.split_at_mut((i + 1) * np);
        let prev = &done[i * np..];
        rest[..np]
            .par_iter_mut()
            .enumerate()
            .for_each(|(p, s)| *s = prev[p] + z[i * np + p] * dw[p]);
    }
    let last = &stoch[n * np..];
    let mean = det_sum_by(np, |p| terminal[p] - last[p]) / T::from_usize_lossy(np);
    stoch.par_iter_mut().for_each(|s| *s += mean);
    Ok(Representation {
        z,
        martingale: stoch,
        mean,
        regularized,
    })
}

/// Per-step residuals of a candidate solution in the discrete dynamics
/// `Y_i = Y_{i+1} + f_i dt - Z_i dW_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport<T> {
    /// Root mean square residual per step `i < N`.
    pub step_rms: Vec<T>,
    pub max_step_rms: T,
    /// Largest absolute residual over all paths and steps.
    pub max_abs: T,
    /// Mean square of `Y_N - xi`.
    pub terminal_mismatch: T,
}

impl<T: Scalar> ResidualReport<T> {
    pub fn passes(&self, tolerance: T) -> bool {
        self.terminal_mismatch == T::zero() && self.max_step_rms <= tolerance
    }
}

/// Residuals of `sol` against the generator, using the increments of the
/// original-measure Brownian motion of the ensemble.
pub fn residual_check<T: Scalar>(
    sol: &GridSolution<T>,
    gen: &Generator<T>,
    terminal: &[T],
    ensemble: &PathEnsemble<T>,
) -> Result<ResidualReport<T>> {
    let grid = ensemble.grid();
    if sol.grid().steps() != grid.steps() || sol.n_paths() != ensemble.n_paths() {
        return Err(invalid("solution and ensemble do not match"));
    }
    let weights = gen.grid_weights(grid)?;
    residual_check_with(sol, gen, &weights, terminal, ensemble)
}

pub fn residual_check_with<T: Scalar>(
    sol: &GridSolution<T>,
    gen: &Generator<T>,
    weights: &GridWeights<T>,
    terminal: &[T],
    ensemble: &PathEnsemble<T>,
) -> Result<ResidualReport<T>> {
    let n = ensemble.grid().steps();
    let np = ensemble.n_paths();
    let dt = ensemble.grid().dt();
    if terminal.len() != np {
        return Err(invalid("terminal values do not match the ensemble"));
    }
    let f = gen.fill(sol, weights)?;
    let mut step_rms = Vec::with_capacity(n);
    let mut max_abs = T::zero();
    for i in 0..n {
        let y0 = sol.y_at(i);
        let y1 = sol.y_at(i + 1);
        let z = sol.z_at(i);
        let dw = ensemble.increments_at(i);
        let fi = &f[i * np..(i + 1) * np];
        let r = |p: usize| y0[p] - y1[p] - fi[p] * dt + z[p] * dw[p];
        let ms = det_sum_by(np, |p| r(p).powi(2)) / T::from_usize_lossy(np);
        step_rms.push(ms.sqrt());
        max_abs = max_abs.max(det_max_by(np, |p| r(p).abs()));
    }
    let yn = sol.y_at(n);
    let terminal_mismatch = det_sum_by(np, |p| (yn[p] - terminal[p]).powi(2)) / T::from_usize_lossy(np);
    let max_step_rms = step_rms.iter().copied().fold(T::zero(), T::max);
    Ok(ResidualReport {
        step_rms,
        max_step_rms,
        max_abs,
        terminal_mismatch,
    })
}

/// Sample mean of `values`.
pub fn sample_mean<T: Scalar>(values: &[T]) -> T {
    det_sum(values) / T::from_usize_lossy(values.len().max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::simulate_paths;

    fn ensemble(n_paths: usize, steps: usize, seed: u64) -> PathEnsemble<f64> {
        let g = TimeGrid::new(1.0, steps).unwrap();
        simulate_paths(&g, n_paths, seed, None).unwrap()
    }

    #[test]
    fn constant_payoff_is_exact() {
        let e = ensemble(5000, 10, 1);
        let b = RegressionBasis::default();
        let c = vec![0.3; 5000];
        let p = conditional_expectation(&e, &c, 5, &b).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn step_zero_is_sample_mean() {
        let e = ensemble(5000, 10, 2);
        let b = RegressionBasis::default();
        let wt = e.brownian_at(10).to_vec();
        let p = conditional_expectation(&e, &wt, 0, &b).unwrap();
        let m = sample_mean(&wt);
        assert!(p.values.iter().all(|&v| (v - m).abs() < 1e-15));
    }

    #[test]
    fn cholesky_solves_small_system() {
        let a = [4.0f64, 2.0, 2.0, 3.0];
        let x = cholesky_solve(&a, &[6.0, 5.0], 2, 0.0, 0.0).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
        // singular matrix falls back to ridge
        let s = [1.0f64, 1.0, 1.0, 1.0];
        let (x, reg) = solve_normal_equations(&s, &[1.0, 1.0], 2);
        assert!(reg);
        assert!((x[0] + x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn exponents_count() {
        let b = RegressionBasis::<f64>::polynomial(3).unwrap();
        assert_eq!(b.exponents(1).len(), 4);
        assert_eq!(b.exponents(2).len(), 10);
        assert!(RegressionBasis::<f64>::polynomial(0).is_err());
    }

    #[test]
    fn solution_shape_checks() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        assert!(GridSolution::new(g, 2, vec![0.0; 8], vec![0.0; 6]).is_ok());
        assert!(GridSolution::new(g, 2, vec![0.0; 7], vec![0.0; 6]).is_err());
    }
}

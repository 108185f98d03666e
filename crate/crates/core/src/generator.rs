//! Time-delayed generators `f(t, Y_t, Z_t)` acting on past segments.
//!
//! Values before time zero follow the usual convention: `Y(t) = Y(0)` and
//! `Z(t) = 0` for `t < 0`. The integral-of-`Y` generator carries its own
//! indicator, so negative times contribute nothing there.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::delay::{DelayMeasure, GridWeights};
use crate::error::{invalid, Result};
use crate::grid::TimeGrid;
use crate::lsmc::GridSolution;
use crate::scalar::Scalar;

/// Past of one path seen from step `step`.
#[derive(Debug, Clone, Copy)]
pub struct PastSegment<'a, T> {
    step: usize,
    y: &'a [T],
    z: &'a [T],
}

impl<'a, T: Scalar> PastSegment<'a, T> {
    /// `y` and `z` hold the path values from step 0 up to at least `step`.
    pub fn new(step: usize, y: &'a [T], z: &'a [T]) -> Result<Self> {
        if y.len() <= step || z.len() <= step {
            return Err(invalid(format!(
                "segment needs values up to step {step}, got {} and {}",
                y.len(),
                z.len()
            )));
        }
        Ok(Self { step, y, z })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// `Y` at step `step - lag`, or `Y(0)` before time zero.
    pub fn value_y(&self, lag: usize) -> T {
        if lag > self.step {
            self.y[0]
        } else {
            self.y[self.step - lag]
        }
    }

    /// `Z` at step `step - lag`, or zero before time zero.
    pub fn value_z(&self, lag: usize) -> T {
        if lag > self.step {
            T::zero()
        } else {
            self.z[self.step - lag]
        }
    }

    fn y_inside(&self, lag: usize) -> T {
        if lag > self.step {
            T::zero()
        } else {
            self.y[self.step - lag]
        }
    }
}

/// Bounded function `g` on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GFunction<T> {
    Constant(T),
    /// Values at grid points; `N` or `N + 1` entries.
    Table(Vec<T>),
}

impl<T: Scalar> GFunction<T> {
    pub fn value(&self, step: usize) -> T {
        match self {
            GFunction::Constant(c) => *c,
            GFunction::Table(v) => v.get(step).copied().unwrap_or_else(T::zero),
        }
    }

    pub fn sup_abs(&self) -> T {
        match self {
            GFunction::Constant(c) => c.abs(),
            GFunction::Table(v) => v.iter().fold(T::zero(), |m, x| m.max(x.abs())),
        }
    }

    fn check(&self, grid: &TimeGrid<T>) -> Result<()> {
        if let GFunction::Table(v) = self {
            let n = grid.steps();
            if v.len() != n && v.len() != n + 1 {
                return Err(invalid(format!(
                    "g table has {} entries, grid needs {} or {}",
                    v.len(),
                    n,
                    n + 1
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(invalid("g table is unbounded"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GeneratorKind<T> {
    Zero,
    /// `k * int Y(t + u) alpha(du)`; the fixed delay `k Y(t - T)` is the
    /// point mass at `-T`.
    DelayedY { k: T, measure: DelayMeasure<T> },
    /// `k * int_0^t Y(s) ds`.
    IntegralY { k: T },
    /// `int g(t + u) Z(t + u) alpha(du) + c`.
    LinearZ {
        g: GFunction<T>,
        measure: DelayMeasure<T>,
        offset: T,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator<T> {
    horizon: T,
    kind: GeneratorKind<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn zero(horizon: T) -> Self {
        Self {
            horizon,
            kind: GeneratorKind::Zero,
        }
    }

    /// `k Y(t - T)`.
    pub fn fixed_delay_y(k: T, horizon: T) -> Result<Self> {
        Self::delayed_y(k, DelayMeasure::dirac(horizon, horizon)?)
    }

    pub fn delayed_y(k: T, measure: DelayMeasure<T>) -> Result<Self> {
        if !k.is_finite() {
            return Err(invalid("K must be finite"));
        }
        Ok(Self {
            horizon: measure.horizon(),
            kind: GeneratorKind::DelayedY { k, measure },
        })
    }

    /// `k int_0^t Y(s) ds`.
    pub fn uniform_integral_y(k: T, horizon: T) -> Result<Self> {
        if !k.is_finite() {
            return Err(invalid("K must be finite"));
        }
        DelayMeasure::uniform(horizon)?;
        Ok(Self {
            horizon,
            kind: GeneratorKind::IntegralY { k },
        })
    }

    pub fn linear_delayed_z(g: GFunction<T>, measure: DelayMeasure<T>) -> Result<Self> {
        Self::affine_linear_delayed_z(g, measure, T::zero())
    }

    pub fn affine_linear_delayed_z(g: GFunction<T>, measure: DelayMeasure<T>, c: T) -> Result<Self> {
        if !g.sup_abs().is_finite() || !c.is_finite() {
            return Err(invalid("g and c must be bounded"));
        }
        Ok(Self {
            horizon: measure.horizon(),
            kind: GeneratorKind::LinearZ {
                g,
                measure,
                offset: c,
            },
        })
    }

    /// Same generator plus a constant.
    pub fn with_offset(&self, c: T) -> Result<Self> {
        match &self.kind {
            GeneratorKind::LinearZ { g, measure, offset } => {
                Self::affine_linear_delayed_z(g.clone(), measure.clone(), *offset + c)
            }
            _ => Err(invalid("only the linear Z generator carries an offset")),
        }
    }

    pub fn kind(&self) -> &GeneratorKind<T> {
        &self.kind
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn depends_on_y(&self) -> bool {
        matches!(
            self.kind,
            GeneratorKind::DelayedY { .. } | GeneratorKind::IntegralY { .. }
        )
    }

    /// Constant `K` of the delayed Lipschitz condition
    /// `|f(y1, z1) - f(y2, z2)|^2 <= K int (|y1 - y2|^2 + |z1 - z2|^2)(t + u) alpha(du)`.
    pub fn lipschitz_constant(&self) -> T {
        match &self.kind {
            GeneratorKind::Zero => T::zero(),
            GeneratorKind::DelayedY { k, .. } => *k * *k,
            GeneratorKind::IntegralY { k } => (*k * self.horizon).powi(2),
            GeneratorKind::LinearZ { g, .. } => g.sup_abs().powi(2),
        }
    }

    /// The delay measure `alpha` of the Lipschitz condition.
    pub fn measure(&self) -> DelayMeasure<T> {
        match &self.kind {
            GeneratorKind::Zero => {
                DelayMeasure::dirac(self.horizon, T::zero()).expect("horizon validated")
            }
            GeneratorKind::DelayedY { measure, .. } | GeneratorKind::LinearZ { measure, .. } => {
                measure.clone()
            }
            GeneratorKind::IntegralY { .. } => {
                DelayMeasure::uniform(self.horizon).expect("horizon validated")
            }
        }
    }

    pub fn grid_weights(&self, grid: &TimeGrid<T>) -> Result<GridWeights<T>> {
        if let GeneratorKind::LinearZ { g, .. } = &self.kind {
            g.check(grid)?;
        }
        self.measure().discretize(grid)
    }

    fn check_weights(&self, weights: &GridWeights<T>) -> Result<()> {
        let grid = weights.grid();
        let rel = (grid.horizon() - self.horizon).abs() / self.horizon;
        if rel > T::epsilon() * T::lit(16.0) {
            return Err(invalid("generator and grid weights use different horizons"));
        }
        if let GeneratorKind::LinearZ { g, .. } = &self.kind {
            g.check(grid)?;
        }
        Ok(())
    }

    /// Generator value at step `step` of one path, with the delay integral
    /// taken as `sum_j w_j * value(step - j)`.
    pub fn eval(&self, step: usize, seg: &PastSegment<'_, T>, weights: &GridWeights<T>) -> Result<T> {
        self.check_weights(weights)?;
        if step != seg.step() {
            return Err(invalid("segment is anchored at a different step"));
        }
        if step >= weights.grid().steps() {
            return Err(invalid(format!("step {step} has no time interval")));
        }
        Ok(match &self.kind {
            GeneratorKind::Zero => T::zero(),
            GeneratorKind::DelayedY { k, .. } => {
                *k * weights
                    .support()
                    .fold(T::zero(), |s, (j, w)| s + w * seg.value_y(j))
            }
            GeneratorKind::IntegralY { k } => {
                *k * self.horizon
                    * weights
                        .support()
                        .fold(T::zero(), |s, (j, w)| s + w * seg.y_inside(j))
            }
            GeneratorKind::LinearZ { g, offset, .. } => {
                let v = weights.support().fold(T::zero(), |s, (j, w)| {
                    if j > step {
                        s
                    } else {
                        s + w * g.value(step - j) * seg.value_z(j)
                    }
                });
                v + *offset
            }
        })
    }

    /// Checks the discrete Lipschitz inequality for a pair of segments.
    pub fn lipschitz_check(
        &self,
        a: &PastSegment<'_, T>,
        b: &PastSegment<'_, T>,
        weights: &GridWeights<T>,
    ) -> Result<bool> {
        let step = a.step();
        let fa = self.eval(step, a, weights)?;
        let fb = self.eval(step, b, weights)?;
        let lhs = (fa - fb).powi(2);
        let rhs = weights.support().fold(T::zero(), |s, (j, w)| {
            s + w * ((a.value_y(j) - b.value_y(j)).powi(2) + (a.value_z(j) - b.value_z(j)).powi(2))
        });
        let rhs = self.lipschitz_constant() * rhs;
        let slack = T::epsilon() * T::lit(64.0) * (T::one() + rhs + fa.abs().max(fb.abs()).powi(2));
        Ok(lhs <= rhs + slack)
    }

    /// Generator values on every path and step `0..N`, time-major.
    ///
    /// The uniform part of the delay measure is handled with running sums, so
    /// the cost is linear in the number of steps.
    pub fn fill(&self, sol: &GridSolution<T>, weights: &GridWeights<T>) -> Result<Vec<T>> {
        self.check_weights(weights)?;
        let grid = sol.grid();
        if !weights.same_grid(grid) {
            return Err(invalid("grid weights belong to another grid"));
        }
        let n = grid.steps();
        let np = sol.n_paths();
        let mut out = vec![T::zero(); n * np];
        match &self.kind {
            GeneratorKind::Zero => {}
            GeneratorKind::DelayedY { k, measure } => {
                let y0 = sol.y_at(0);
                let value = |m: isize, p: usize| {
                    if m < 0 {
                        y0[p]
                    } else {
                        sol.y_at(m as usize)[p]
                    }
                };
                delay_sum(measure, weights, n, np, &mut out, value, *k);
            }
            GeneratorKind::IntegralY { k } => {
                let measure = self.measure();
                let value = |m: isize, p: usize| {
                    if m < 0 {
                        T::zero()
                    } else {
                        sol.y_at(m as usize)[p]
                    }
                };
                delay_sum(&measure, weights, n, np, &mut out, value, *k * self.horizon);
            }
            GeneratorKind::LinearZ { g, measure, offset } => {
                let value = |m: isize, p: usize| {
                    if m < 0 {
                        T::zero()
                    } else {
                        g.value(m as usize) * sol.z_at(m as usize)[p]
                    }
                };
                delay_sum(measure, weights, n, np, &mut out, value, T::one());
                if *offset != T::zero() {
                    out.par_iter_mut().for_each(|x| *x += *offset);
                }
            }
        }
        Ok(out)
    }

    /// Generator values at `Y = Z = 0` (the constant part), per step.
    pub fn at_zero(&self, steps: usize) -> Vec<T> {
        let c = match &self.kind {
            GeneratorKind::LinearZ { offset, .. } => *offset,
            _ => T::zero(),
        };
        vec![c; steps]
    }
}

/// `out[i] = scale * sum_j w_j value(i - j)` using running sums for the
/// uniform component and explicit offsets for the atoms.
fn delay_sum<T, F>(
    measure: &DelayMeasure<T>,
    weights: &GridWeights<T>,
    n: usize,
    np: usize,
    out: &mut [T],
    value: F,
    scale: T,
) where
    T: Scalar,
    F: Fn(isize, usize) -> T + Sync,
{
    let c = measure.uniform_weight();
    if c == T::zero() || n < 2 {
        let support: Vec<(usize, T)> = weights.support().collect();
        out.par_chunks_mut(np).enumerate().for_each(|(i, row)| {
            for (p, x) in row.iter_mut().enumerate() {
                let s = support
                    .iter()
                    .fold(T::zero(), |s, &(j, w)| s + w * value(i as isize - j as isize, p));
                *x = scale * s;
            }
        });
        return;
    }

    // atoms alone, snapped exactly as in the dense weights
    let nf = T::from_usize_lossy(n);
    let dense = weights.weights();
    let half = c / (nf + nf);
    let mid = c / nf;
    let atoms: Vec<(usize, T)> = dense
        .iter()
        .enumerate()
        .filter_map(|(j, &w)| {
            let u = if j == 0 || j == n { half } else { mid };
            let a = w - u;
            (a.abs() > T::epsilon() * T::lit(8.0)).then_some((j, a))
        })
        .collect();

    // running[p] = sum_{m=0}^{i-1} value(m, p)
    let mut running = vec![T::zero(); np];
    for i in 0..n {
        if i > 0 {
            running
                .par_iter_mut()
                .enumerate()
                .for_each(|(p, r)| *r += value(i as isize - 1, p));
        }
        let row = &mut out[i * np..(i + 1) * np];
        let neg_count = T::from_usize_lossy(n - 1 - i);
        row.par_iter_mut().enumerate().for_each(|(p, x)| {
            // offsets 1..N-1 reach steps i-1 down to i-N+1
            let inner = running[p] + neg_count * value(-1, p);
            let mut s = half * (value(i as isize, p) + value(i as isize - n as isize, p)) + mid * inner;
            for &(j, w) in &atoms {
                s += w * value(i as isize - j as isize, p);
            }
            *x = scale * s;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;

    fn grid() -> TimeGrid<f64> {
        TimeGrid::new(1.0, 10).unwrap()
    }

    fn random_solution(np: usize, seed: u64) -> GridSolution<f64> {
        use rand::Rng;
        let g = grid();
        let mut rng = crate::grid::path_rng(seed, 0);
        let y = (0..11 * np).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z = (0..10 * np).map(|_| rng.gen_range(-2.0..2.0)).collect();
        GridSolution::new(g, np, y, z).unwrap()
    }

    fn check_fill_matches_eval(gen: &Generator<f64>) {
        let sol = random_solution(7, 3);
        let w = gen.grid_weights(sol.grid()).unwrap();
        let f = gen.fill(&sol, &w).unwrap();
        for p in 0..7 {
            let y = sol.path_y(p);
            let z = sol.path_z(p);
            for i in 0..10 {
                let seg = PastSegment::new(i, &y, &z).unwrap();
                let v = gen.eval(i, &seg, &w).unwrap();
                assert!((v - f[i * 7 + p]).abs() < 1e-12, "step {i}: {v} vs {}", f[i * 7 + p]);
            }
        }
    }

    #[test]
    fn fill_agrees_with_eval() {
        let t = 1.0;
        check_fill_matches_eval(&Generator::zero(t));
        check_fill_matches_eval(&Generator::fixed_delay_y(0.7, t).unwrap());
        check_fill_matches_eval(&Generator::uniform_integral_y(1.3, t).unwrap());
        let mix = DelayMeasure::new(t, vec![(-0.3, 0.25), (0.0, 0.25)], 0.5).unwrap();
        check_fill_matches_eval(&Generator::delayed_y(0.4, mix.clone()).unwrap());
        let table = GFunction::Table((0..11).map(|i| (i as f64 * 0.3).cos()).collect());
        check_fill_matches_eval(&Generator::affine_linear_delayed_z(table, mix, 0.1).unwrap());
        let unif = DelayMeasure::uniform(t).unwrap();
        check_fill_matches_eval(&Generator::linear_delayed_z(GFunction::Constant(0.5), unif).unwrap());
    }

    #[test]
    fn fixed_delay_reads_initial_value() {
        let gen = Generator::fixed_delay_y(0.5, 1.0).unwrap();
        let w = gen.grid_weights(&grid()).unwrap();
        let y: Vec<f64> = (0..11).map(|i| 3.0 + i as f64).collect();
        let z = vec![0.0; 10];
        for i in 0..10 {
            let seg = PastSegment::new(i, &y, &z).unwrap();
            assert_eq!(gen.eval(i, &seg, &w).unwrap(), 1.5);
        }
    }

    #[test]
    fn mismatched_table_is_rejected() {
        let gen = Generator::linear_delayed_z(
            GFunction::Table(vec![1.0; 4]),
            DelayMeasure::uniform(1.0).unwrap(),
        )
        .unwrap();
        assert!(gen.grid_weights(&grid()).is_err());
        let other = Generator::zero(2.0);
        let w = Generator::zero(1.0).grid_weights(&grid()).unwrap();
        let y = [0.0; 11];
        let seg = PastSegment::new(0, &y, &y).unwrap();
        assert!(other.eval(0, &seg, &w).is_err());
    }

    #[test]
    fn lipschitz_constants() {
        assert_eq!(Generator::fixed_delay_y(0.5, 2.0).unwrap().lipschitz_constant(), 0.25);
        assert_eq!(Generator::uniform_integral_y(0.5, 2.0).unwrap().lipschitz_constant(), 1.0);
        let g = Generator::linear_delayed_z(
            GFunction::Table(vec![0.1f64, -0.4, 0.2]),
            DelayMeasure::uniform(1.0).unwrap(),
        )
        .unwrap();
        assert!((g.lipschitz_constant() - 0.16).abs() < 1e-15);
        assert!(!g.depends_on_y());
    }
}

//! Uniform time grids and seeded Brownian path ensembles.
//!
//! Arrays are stored time-major: the values of all paths at one step are
//! contiguous, which is the access pattern of the regression engine.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid<T> {
    horizon: T,
    steps: usize,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn new(horizon: T, steps: usize) -> Result<Self> {
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(invalid("grid needs at least one step"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> T {
        self.horizon / T::from_usize_lossy(self.steps)
    }

    /// Grid point `t_i = i T / N`; the last point is exactly `T`.
    pub fn time(&self, i: usize) -> T {
        if i >= self.steps {
            self.horizon
        } else {
            self.horizon * T::from_usize_lossy(i) / T::from_usize_lossy(self.steps)
        }
    }

    pub fn points(&self) -> Vec<T> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }

    /// Same grid with twice as many steps.
    pub fn refined(&self) -> Self {
        Self {
            horizon: self.horizon,
            steps: self.steps * 2,
        }
    }
}

/// Random stream of one path: ChaCha8 keyed by the master seed, with the path
/// index as stream id. Independent of scheduling.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Simulated Brownian paths.
///
/// `brownian` holds `W(t_i)` for the Brownian motion under the original
/// measure; `increments` are its differences. When a drift `theta` was
/// applied, `W` has mean `sum theta_m dt` and the driftless noise
/// `W(t_{i+1}) - W(t_i) - theta_i dt` is kept separately: it is a Brownian
/// increment under the shifted measure.
#[derive(Debug, Clone)]
pub struct PathEnsemble<T> {
    grid: TimeGrid<T>,
    n_paths: usize,
    seed: u64,
    drift: Option<Vec<T>>,
    brownian: Vec<T>,
    increments: Vec<T>,
    noise: Option<Vec<T>>,
}

/// Simulates `n_paths` paths with optional drift `theta` given per step
/// (values `theta(t_i)`, `i < N`; a table of length `N + 1` is accepted and
/// its last entry ignored).
pub fn simulate_paths<T: Scalar>(
    grid: &TimeGrid<T>,
    n_paths: usize,
    seed: u64,
    drift: Option<&[T]>,
) -> Result<PathEnsemble<T>> {
    if n_paths == 0 {
        return Err(invalid("n_paths must be positive"));
    }
    let n = grid.steps();
    if let Some(th) = drift {
        if th.len() != n && th.len() != n + 1 {
            return Err(invalid(format!(
                "drift table has {} entries, grid needs {} or {}",
                th.len(),
                n,
                n + 1
            )));
        }
        if th.iter().any(|x| !x.is_finite()) {
            return Err(invalid("drift table must be finite"));
        }
    }
    let dt = grid.dt();
    let sd = dt.sqrt();

    // path-major draws, one stream per path
    let mut raw = vec![T::zero(); n_paths * n];
    raw.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        let mut rng = path_rng(seed, p);
        for x in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = T::lit(z) * sd;
        }
    });
    let mut noise = vec![T::zero(); n_paths * n];
    noise
        .par_chunks_mut(n_paths)
        .enumerate()
        .for_each(|(i, col)| {
            for (p, x) in col.iter_mut().enumerate() {
                *x = raw[p * n + i];
            }
        });
    drop(raw);

    let mut brownian = vec![T::zero(); n_paths * (n + 1)];
    let mut increments = vec![T::zero(); n_paths * n];
    for i in 0..n {
        let shift = drift.map_or(T::zero(), |th| th[i] * dt);
        let (done, rest) = brownian.split_at_mut((i + 1) * n_paths);
        let prev = &done[i * n_paths..];
        let next = &mut rest[..n_paths];
        let inc = &mut increments[i * n_paths..(i + 1) * n_paths];
        let nz = &noise[i * n_paths..(i + 1) * n_paths];
        next.par_iter_mut()
            .zip(inc.par_iter_mut())
            .enumerate()
            .for_each(|(p, (w, d))| {
                *w = prev[p] + (nz[p] + shift);
                *d = *w - prev[p];
            });
    }

    let (drift, noise) = match drift {
        Some(th) => (Some(th[..n].to_vec()), Some(noise)),
        None => (None, None),
    };
    Ok(PathEnsemble {
        grid: *grid,
        n_paths,
        seed,
        drift,
        brownian,
        increments,
        noise,
    })
}

impl<T: Scalar> PathEnsemble<T> {
    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn drift(&self) -> Option<&[T]> {
        self.drift.as_deref()
    }

    pub fn has_drift(&self) -> bool {
        self.drift.is_some()
    }

    /// `W(t_i)` of all paths.
    pub fn brownian_at(&self, step: usize) -> &[T] {
        &self.brownian[step * self.n_paths..(step + 1) * self.n_paths]
    }

    /// `W(t_{i+1}) - W(t_i)` of all paths, `i < N`.
    pub fn increments_at(&self, step: usize) -> &[T] {
        &self.increments[step * self.n_paths..(step + 1) * self.n_paths]
    }

    /// Increments of the Brownian motion under the simulation measure: equal
    /// to [`increments_at`](Self::increments_at) without drift.
    pub fn noise_at(&self, step: usize) -> &[T] {
        match &self.noise {
            Some(v) => &v[step * self.n_paths..(step + 1) * self.n_paths],
            None => self.increments_at(step),
        }
    }

    /// `W(t_step)` on path `path`.
    pub fn brownian_value(&self, path: usize, step: usize) -> Result<T> {
        if path >= self.n_paths {
            return Err(Error::OutOfRange {
                what: "path",
                index: path,
                limit: self.n_paths,
            });
        }
        if step > self.grid.steps() {
            return Err(Error::OutOfRange {
                what: "step",
                index: step,
                limit: self.grid.steps() + 1,
            });
        }
        Ok(self.brownian[step * self.n_paths + path])
    }

    /// Increment of one path, checked.
    pub fn increment(&self, path: usize, step: usize) -> Result<T> {
        if path >= self.n_paths || step >= self.grid.steps() {
            return Err(Error::OutOfRange {
                what: "increment",
                index: step,
                limit: self.grid.steps(),
            });
        }
        Ok(self.increments[step * self.n_paths + path])
    }

    /// Driftless copy of the noise: the shifted-measure Brownian motion seen
    /// as a base ensemble.
    pub fn noise_ensemble(&self) -> PathEnsemble<T> {
        let Some(noise) = &self.noise else {
            return self.clone();
        };
        let n = self.grid.steps();
        let np = self.n_paths;
        let mut brownian = vec![T::zero(); np * (n + 1)];
        let mut increments = vec![T::zero(); np * n];
        for i in 0..n {
            for p in 0..np {
                let w = brownian[i * np + p] + noise[i * np + p];
                brownian[(i + 1) * np + p] = w;
                increments[i * np + p] = w - brownian[i * np + p];
            }
        }
        PathEnsemble {
            grid: self.grid,
            n_paths: np,
            seed: self.seed,
            drift: None,
            brownian,
            increments,
            noise: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points() {
        let g = TimeGrid::new(1.3f64, 7).unwrap();
        let pts = g.points();
        assert_eq!(pts[0], 0.0);
        assert_eq!(pts[7], 1.3);
        assert!(pts.windows(2).all(|w| w[0] < w[1]));
        assert!(TimeGrid::new(0.0f64, 3).is_err());
        assert!(TimeGrid::new(1.0f64, 0).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = TimeGrid::new(1.0f64, 4).unwrap();
        assert!(simulate_paths(&g, 0, 1, None).is_err());
        assert!(simulate_paths(&g, 3, 1, Some(&[1.0, 2.0])).is_err());
        let e = simulate_paths(&g, 3, 1, None).unwrap();
        assert!(e.brownian_value(3, 0).is_err());
        assert!(e.brownian_value(0, 5).is_err());
    }

    #[test]
    fn start_at_zero_and_prefix_sums() {
        let g = TimeGrid::new(1.0f64, 10).unwrap();
        let e = simulate_paths(&g, 50, 9, None).unwrap();
        for p in 0..50 {
            assert_eq!(e.brownian_value(p, 0).unwrap(), 0.0);
            let mut acc = 0.0;
            for i in 0..10 {
                let d = e.increment(p, i).unwrap();
                let w0 = e.brownian_value(p, i).unwrap();
                let w1 = e.brownian_value(p, i + 1).unwrap();
                assert_eq!(w1 - w0, d);
                acc += d;
            }
            let wn = e.brownian_value(p, 10).unwrap();
            assert!((acc - wn).abs() <= 8.0 * f64::EPSILON * (1.0 + wn.abs()));
        }
    }

    #[test]
    fn f32_paths() {
        let g = TimeGrid::new(1.0f32, 8).unwrap();
        let e = simulate_paths(&g, 2000, 3, None).unwrap();
        let wt = e.brownian_at(8);
        let m: f32 = wt.iter().sum::<f32>() / 2000.0;
        assert!(m.abs() < 0.1);
    }
}

//! Terminal conditions, existence classification and exact solutions of the
//! explicitly solvable delayed equations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::delay::DelayMeasure;
use crate::error::{invalid, Error, Result};
use crate::generator::{GFunction, Generator};
use crate::girsanov::{q_shifted_ensemble, DriftSpec};
use crate::grid::{PathEnsemble, TimeGrid};
use crate::lsmc::{martingale_representation, GridSolution, RegressionBasis};
use crate::scalar::Scalar;
use crate::stats::{Estimate, Z99};

/// Terminal value `xi` as a functional of the Brownian path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalSpec {
    Constant { value: f64 },
    /// `scale W(T) + shift`.
    Brownian { scale: f64, shift: f64 },
    /// `(W(T) - shift)^2`.
    ShiftedSquare { shift: f64 },
    /// `sin W(T)`.
    SinBrownian,
    /// `int_0^T cos(s) dW(s)`.
    CosIntegral,
    /// `int_0^T cos(T - s) dW(s)`.
    CosKernel,
    /// `M` stopped when it first reaches `+-1` on the grid, where
    /// `M(t) = int_0^t 2 / (1 - s)^3 dW(s)` on horizon 1; the crossing value is
    /// truncated to the level.
    StoppedMartingale,
}

impl TerminalSpec {
    pub fn is_constant(&self) -> bool {
        matches!(self, TerminalSpec::Constant { .. })
    }

    /// Values on every path. Functionals of `W` use the original-measure
    /// paths; the stopped martingale is driven by the simulation-measure
    /// noise.
    pub fn evaluate<T: Scalar>(&self, ensemble: &PathEnsemble<T>) -> Result<Vec<T>> {
        let grid = ensemble.grid();
        let n = grid.steps();
        let np = ensemble.n_paths();
        let wn = ensemble.brownian_at(n);
        Ok(match *self {
            TerminalSpec::Constant { value } => vec![T::lit(value); np],
            TerminalSpec::Brownian { scale, shift } => {
                let (a, b) = (T::lit(scale), T::lit(shift));
                wn.par_iter().map(|&w| a * w + b).collect()
            }
            TerminalSpec::ShiftedSquare { shift } => {
                let b = T::lit(shift);
                wn.par_iter().map(|&w| (w - b).powi(2)).collect()
            }
            TerminalSpec::SinBrownian => wn.par_iter().map(|&w| w.sin()).collect(),
            TerminalSpec::CosIntegral | TerminalSpec::CosKernel => {
                let state = self.auxiliary_state(ensemble).expect("state defined");
                state[n * np..].to_vec()
            }
            TerminalSpec::StoppedMartingale => stopped_martingale(ensemble)?.terminal,
        })
    }

    /// Exact mean under the original measure, where known.
    pub fn mean(&self, horizon: f64) -> Option<f64> {
        match *self {
            TerminalSpec::Constant { value } => Some(value),
            TerminalSpec::Brownian { shift, .. } => Some(shift),
            TerminalSpec::ShiftedSquare { shift } => Some(horizon + shift * shift),
            TerminalSpec::SinBrownian | TerminalSpec::CosIntegral | TerminalSpec::CosKernel => {
                Some(0.0)
            }
            TerminalSpec::StoppedMartingale => None,
        }
    }

    /// Integrand of the martingale representation under the original measure
    /// at step `step`, where known in closed form.
    pub fn integrand_at<T: Scalar>(&self, ensemble: &PathEnsemble<T>, step: usize) -> Option<Vec<T>> {
        let grid = ensemble.grid();
        let np = ensemble.n_paths();
        let t = grid.time(step);
        let horizon = grid.horizon();
        let w = ensemble.brownian_at(step);
        match *self {
            TerminalSpec::Constant { .. } => Some(vec![T::zero(); np]),
            TerminalSpec::Brownian { scale, .. } => Some(vec![T::lit(scale); np]),
            TerminalSpec::ShiftedSquare { shift } => {
                let b = T::lit(shift);
                let two = T::lit(2.0);
                Some(w.par_iter().map(|&x| two * (x - b)).collect())
            }
            TerminalSpec::SinBrownian => {
                let damp = (T::lit(-0.5) * (horizon - t)).exp();
                Some(w.par_iter().map(|&x| x.cos() * damp).collect())
            }
            TerminalSpec::CosIntegral => Some(vec![t.cos(); np]),
            TerminalSpec::CosKernel => Some(vec![(horizon - t).cos(); np]),
            TerminalSpec::StoppedMartingale => None,
        }
    }

    /// Conditional expectation `E[xi | F_t]` under the original measure at
    /// step `step`, where known in closed form.
    pub fn conditional_mean_at<T: Scalar>(&self, ensemble: &PathEnsemble<T>, step: usize) -> Option<Vec<T>> {
        let grid = ensemble.grid();
        let np = ensemble.n_paths();
        let t = grid.time(step);
        let rest = grid.horizon() - t;
        let w = ensemble.brownian_at(step);
        match *self {
            TerminalSpec::Constant { value } => Some(vec![T::lit(value); np]),
            TerminalSpec::Brownian { scale, shift } => {
                let (a, b) = (T::lit(scale), T::lit(shift));
                Some(w.par_iter().map(|&x| a * x + b).collect())
            }
            TerminalSpec::ShiftedSquare { shift } => {
                let b = T::lit(shift);
                Some(w.par_iter().map(|&x| (x - b).powi(2) + rest).collect())
            }
            TerminalSpec::SinBrownian => {
                let damp = (T::lit(-0.5) * rest).exp();
                Some(w.par_iter().map(|&x| x.sin() * damp).collect())
            }
            TerminalSpec::CosIntegral | TerminalSpec::CosKernel => {
                let state = self.auxiliary_state(ensemble)?;
                Some(state[step * np..(step + 1) * np].to_vec())
            }
            TerminalSpec::StoppedMartingale => None,
        }
    }

    /// Adapted path functional that, together with `W(t)`, determines the
    /// conditional expectations: the running stochastic integral for the
    /// integral-type terminals. Time-major on steps `0..=N`.
    pub fn auxiliary_state<T: Scalar>(&self, ensemble: &PathEnsemble<T>) -> Option<Vec<T>> {
        let kernel: Box<dyn Fn(T, T) -> T + Sync> = match self {
            TerminalSpec::CosIntegral => Box::new(|t: T, _h: T| t.cos()),
            TerminalSpec::CosKernel => Box::new(|t: T, h: T| (h - t).cos()),
            _ => return None,
        };
        let grid = ensemble.grid();
        let n = grid.steps();
        let np = ensemble.n_paths();
        let h = grid.horizon();
        let mut x = vec![T::zero(); (n + 1) * np];
        for i in 0..n {
            let c = kernel(grid.time(i), h);
            let dw = ensemble.increments_at(i);
            let (done, rest) = x.split_at_mut((i + 1) * np);
            let prev = &done[i * np..];
            rest[..np]
                .par_iter_mut()
                .enumerate()
                .for_each(|(p, v)| *v = prev[p] + c * dw[p]);
        }
        Some(x)
    }

    /// Whether the candidate control `M(t) / cos((T - t) sqrt(K))` of the
    /// boundary case `T sqrt(K) = pi/2` is square integrable, where decidable.
    /// `M` is the representation integrand of `xi`; the kernel vanishes
    /// linearly at `t = 0`, so this holds iff `M` vanishes there.
    pub fn candidate_z_square_integrable(&self, horizon: f64) -> Option<bool> {
        match *self {
            TerminalSpec::Constant { .. } => Some(true),
            TerminalSpec::Brownian { scale, .. } => Some(scale == 0.0),
            // the candidate is square integrable iff the integrand vanishes at 0
            TerminalSpec::CosKernel => Some(horizon.cos().abs() < 1e-12),
            TerminalSpec::CosIntegral => Some(false),
            TerminalSpec::ShiftedSquare { .. } | TerminalSpec::SinBrownian => Some(false),
            TerminalSpec::StoppedMartingale => None,
        }
    }

    /// Regression basis for this terminal, with its path state when needed.
    pub fn basis<T: Scalar>(&self, degree: usize, ensemble: &PathEnsemble<T>) -> Result<RegressionBasis<T>> {
        let b = RegressionBasis::polynomial(degree)?;
        Ok(match self.auxiliary_state(ensemble) {
            Some(state) => b.with_state(state),
            None => b,
        })
    }
}

/// Paths of the stopped martingale.
#[derive(Debug, Clone)]
pub struct StoppedPaths<T> {
    /// Stopped values `M_{tau ^ t_i}`, truncated to `[-1, 1]`, time-major.
    pub stopped: Vec<T>,
    /// Index of the first grid time with `|M| >= 1`, or `N` if none.
    pub tau: Vec<usize>,
    pub terminal: Vec<T>,
}

/// Simulates `M(t) = int_0^t 2/(1-s)^3 dW(s)` with the integrand frozen at
/// the left end of each step (the last step ends at 1 but uses `1 - dt`).
pub fn stopped_martingale<T: Scalar>(ensemble: &PathEnsemble<T>) -> Result<StoppedPaths<T>> {
    let grid = ensemble.grid();
    if (grid.horizon() - T::one()).abs() > T::epsilon() * T::lit(4.0) {
        return Err(invalid("the stopped martingale lives on horizon 1"));
    }
    let n = grid.steps();
    let np = ensemble.n_paths();
    let two = T::lit(2.0);
    let mut stopped = vec![T::zero(); (n + 1) * np];
    let mut tau = vec![n; np];
    let mut raw = vec![T::zero(); np];
    for i in 0..n {
        let s = grid.time(i);
        let c = two / (T::one() - s).powi(3);
        let dw = ensemble.noise_at(i);
        let (done, rest) = stopped.split_at_mut((i + 1) * np);
        let prev = &done[i * np..];
        rest[..np]
            .par_iter_mut()
            .zip(raw.par_iter_mut())
            .zip(tau.par_iter_mut())
            .enumerate()
            .for_each(|(p, ((out, m), t))| {
                if *t <= i {
                    *out = prev[p];
                    return;
                }
                *m += c * dw[p];
                if m.abs() >= T::one() {
                    *t = i + 1;
                    *out = m.signum();
                } else {
                    *out = *m;
                }
            });
    }
    let terminal = stopped[n * np..].to_vec();
    Ok(StoppedPaths {
        stopped,
        tau,
        terminal,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Unique,
    NoSolution,
    Multiple,
    /// Beyond the certified case list: a solution may or may not exist.
    MultipleOrNone,
    /// The decisive mean could not be separated from zero by sampling.
    Indeterminate,
}

/// Knowledge of `E[xi]` used by the classifiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum MeanInfo {
    Exact { value: f64 },
    Sampled { estimate: Estimate },
}

impl MeanInfo {
    pub fn value(&self) -> f64 {
        match self {
            MeanInfo::Exact { value } => *value,
            MeanInfo::Sampled { estimate } => estimate.value,
        }
    }

    fn interval(&self) -> Option<(f64, f64)> {
        match self {
            MeanInfo::Exact { .. } => None,
            MeanInfo::Sampled { estimate } => Some(estimate.interval(Z99)),
        }
    }

    /// `Some(true)` when zero, `Some(false)` when nonzero, `None` when a
    /// sampled interval straddles zero.
    fn is_zero(&self) -> Option<bool> {
        match self {
            MeanInfo::Exact { value } => Some(value.abs() <= 1e-14),
            MeanInfo::Sampled { estimate } => {
                let (lo, hi) = estimate.interval(Z99);
                if lo <= 0.0 && hi >= 0.0 {
                    None
                } else {
                    Some(false)
                }
            }
        }
    }

    pub fn of_terminal<T: Scalar>(spec: &TerminalSpec, horizon: f64, values: &[T]) -> Self {
        match spec.mean(horizon) {
            Some(value) => MeanInfo::Exact { value },
            None => MeanInfo::Sampled {
                estimate: Estimate::of(values),
            },
        }
    }
}

/// Classification together with the condition it was decided on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExistenceClass {
    pub verdict: Verdict,
    /// `T K` for the fixed delay, `T sqrt(K)` for the integral generator.
    pub product: f64,
    /// `1` or `pi/2`.
    pub threshold: f64,
    pub mean: MeanInfo,
    pub mean_interval: Option<(f64, f64)>,
    pub z_square_integrable: Option<bool>,
    /// `Y(0)` when it is determined.
    pub y0: Option<f64>,
    /// False when the verdict extends the explicit case list.
    pub certified: bool,
    pub condition: String,
}

const BOUNDARY_TOL: f64 = 1e-12;

fn on_boundary(product: f64, threshold: f64) -> bool {
    (product - threshold).abs() <= BOUNDARY_TOL * threshold
}

/// Fixed delay `K Y(t - T)`: the mean condition `E[xi] = (1 - T K) Y(0)`.
pub fn classify_example1(horizon: f64, k: f64, mean: MeanInfo) -> ExistenceClass {
    let product = horizon * k;
    let m = mean.value();
    let base = |verdict, y0, certified, condition: String| ExistenceClass {
        verdict,
        product,
        threshold: 1.0,
        mean,
        mean_interval: mean.interval(),
        z_square_integrable: Some(true),
        y0,
        certified,
        condition,
    };
    if on_boundary(product, 1.0) {
        return match mean.is_zero() {
            Some(true) => base(
                Verdict::Multiple,
                None,
                true,
                "TK = 1 and E[xi] = 0: any Y(0) solves E[xi] = (1 - TK) Y(0)".into(),
            ),
            Some(false) => base(
                Verdict::NoSolution,
                None,
                true,
                format!("TK = 1 and E[xi] = {m} != 0 violates E[xi] = (1 - TK) Y(0)"),
            ),
            None => base(
                Verdict::Indeterminate,
                None,
                false,
                "TK = 1 and the sampled E[xi] is not separated from 0".into(),
            ),
        };
    }
    let y0 = m / (1.0 - product);
    if product < 1.0 {
        base(
            Verdict::Unique,
            Some(y0),
            true,
            format!("TK = {product} < 1: Y(0) = E[xi] / (1 - TK)"),
        )
    } else {
        base(
            Verdict::Unique,
            Some(y0),
            false,
            format!("TK = {product} > 1: Y(0) = E[xi] / (1 - TK), beyond the stated cases"),
        )
    }
}

/// Integral generator `K int_0^t Y(s) ds`.
pub fn classify_example2(
    horizon: f64,
    k: f64,
    mean: MeanInfo,
    candidate_z_square_integrable: Option<bool>,
) -> ExistenceClass {
    let m = mean.value();
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mk = |verdict, product: f64, threshold, y0, certified, zsq, condition: String| ExistenceClass {
        verdict,
        product,
        threshold,
        mean,
        mean_interval: mean.interval(),
        z_square_integrable: zsq,
        y0,
        certified,
        condition,
    };
    if k <= 0.0 {
        let a = (-k).sqrt();
        let y0 = m / (a * horizon).cosh();
        return mk(
            Verdict::Unique,
            a * horizon,
            f64::INFINITY,
            Some(y0),
            true,
            Some(true),
            format!("K = {k} <= 0: Y(0) = E[xi] / cosh(T sqrt(-K))"),
        );
    }
    let product = horizon * k.sqrt();
    if on_boundary(product, half_pi) {
        return match mean.is_zero() {
            Some(false) => mk(
                Verdict::NoSolution,
                product,
                half_pi,
                None,
                true,
                candidate_z_square_integrable,
                format!("T sqrt(K) = pi/2 and E[xi] = {m} != 0"),
            ),
            None => mk(
                Verdict::Indeterminate,
                product,
                half_pi,
                None,
                false,
                candidate_z_square_integrable,
                "T sqrt(K) = pi/2 and the sampled E[xi] is not separated from 0".into(),
            ),
            Some(true) => match candidate_z_square_integrable {
                Some(true) => mk(
                    Verdict::Multiple,
                    product,
                    half_pi,
                    None,
                    true,
                    Some(true),
                    "T sqrt(K) = pi/2, E[xi] = 0, candidate Z square integrable".into(),
                ),
                Some(false) => mk(
                    Verdict::NoSolution,
                    product,
                    half_pi,
                    None,
                    true,
                    Some(false),
                    "T sqrt(K) = pi/2, E[xi] = 0, candidate Z not square integrable".into(),
                ),
                None => mk(
                    Verdict::Indeterminate,
                    product,
                    half_pi,
                    None,
                    false,
                    None,
                    "T sqrt(K) = pi/2, E[xi] = 0, integrability of the candidate Z unknown".into(),
                ),
            },
        };
    }
    if product < half_pi {
        let y0 = m / product.cos();
        return mk(
            Verdict::Unique,
            product,
            half_pi,
            Some(y0),
            true,
            Some(true),
            format!("T sqrt(K) = {product} < pi/2: Y(0) = E[xi] / cos(T sqrt(K))"),
        );
    }
    let c = product.cos();
    if c.abs() < 1e-12 && mean.is_zero() == Some(false) {
        return mk(
            Verdict::NoSolution,
            product,
            half_pi,
            None,
            false,
            candidate_z_square_integrable,
            format!("cos(T sqrt(K)) = 0 and E[xi] = {m} != 0"),
        );
    }
    mk(
        Verdict::MultipleOrNone,
        product,
        half_pi,
        (c.abs() >= 1e-12).then(|| m / c),
        false,
        None,
        format!("T sqrt(K) = {product} > pi/2: outside the certified cases"),
    )
}

/// Exact solution on an ensemble with its classification.
#[derive(Debug, Clone)]
pub struct ClosedFormSolution<T> {
    pub solution: GridSolution<T>,
    pub classification: ExistenceClass,
    pub terminal: Vec<T>,
    pub generator: Generator<T>,
}

fn representation_integrand<T: Scalar>(
    terminal: &TerminalSpec,
    values: &[T],
    ensemble: &PathEnsemble<T>,
    degree: usize,
) -> Result<Vec<T>> {
    if ensemble.has_drift() {
        return Err(invalid("closed forms need an ensemble under the original measure"));
    }
    let n = ensemble.grid().steps();
    let np = ensemble.n_paths();
    let mut z = Vec::with_capacity(n * np);
    let exact: Option<Vec<Vec<T>>> = (0..n).map(|i| terminal.integrand_at(ensemble, i)).collect();
    match exact {
        Some(rows) => rows.into_iter().for_each(|r| z.extend(r)),
        None => {
            let basis = terminal.basis(degree, ensemble)?;
            z = martingale_representation(ensemble, values, &basis)?.z;
        }
    }
    Ok(z)
}

fn resolve_y0(class: &ExistenceClass, y0_override: Option<f64>) -> Result<f64> {
    match class.verdict {
        Verdict::Unique => match y0_override {
            None => Ok(class.y0.unwrap_or(f64::NAN)),
            Some(v) => Err(Error::Refused(format!(
                "{}; Y(0) is determined and cannot be set to {v}",
                class.condition
            ))),
        },
        Verdict::Multiple => y0_override.ok_or_else(|| {
            Error::Refused(format!("{}; supply Y(0) to pick a solution", class.condition))
        }),
        Verdict::NoSolution => Err(Error::NoSolution(class.condition.clone())),
        Verdict::MultipleOrNone | Verdict::Indeterminate => Err(Error::Refused(class.condition.clone())),
    }
}

/// `Y(t) = Y(0)(1 - tK) + int_0^t Z dW` for the generator `K Y(t - T)`.
pub fn solve_example1<T: Scalar>(
    terminal: &TerminalSpec,
    ensemble: &PathEnsemble<T>,
    k: T,
    y0_override: Option<T>,
    degree: usize,
) -> Result<ClosedFormSolution<T>> {
    let grid = *ensemble.grid();
    let horizon = grid.horizon();
    let values = terminal.evaluate(ensemble)?;
    let mean = MeanInfo::of_terminal(terminal, horizon.as_f64(), &values);
    let class = classify_example1(horizon.as_f64(), k.as_f64(), mean);
    let y0 = T::lit(resolve_y0(&class, y0_override.map(|v| v.as_f64()))?);
    let z = representation_integrand(terminal, &values, ensemble, degree)?;

    let n = grid.steps();
    let np = ensemble.n_paths();
    let mut y = vec![T::zero(); (n + 1) * np];
    let mut stoch = vec![T::zero(); np];
    for i in 0..=n {
        if i > 0 {
            let dw = ensemble.increments_at(i - 1);
            let zi = &z[(i - 1) * np..i * np];
            stoch
                .par_iter_mut()
                .enumerate()
                .for_each(|(p, s)| *s += zi[p] * dw[p]);
        }
        let det = y0 * (T::one() - grid.time(i) * k);
        y[i * np..(i + 1) * np]
            .par_iter_mut()
            .zip(stoch.par_iter())
            .for_each(|(v, &s)| *v = det + s);
    }
    y[n * np..].copy_from_slice(&values);
    Ok(ClosedFormSolution {
        solution: GridSolution::new(grid, np, y, z)?,
        classification: class,
        terminal: values,
        generator: Generator::fixed_delay_y(k, horizon)?,
    })
}

/// Integral generator `K int_0^t Y(s) ds` with the cosine (`K > 0`) or
/// hyperbolic cosine (`K < 0`) kernels.
pub fn solve_example2<T: Scalar>(
    terminal: &TerminalSpec,
    ensemble: &PathEnsemble<T>,
    k: T,
    y0_override: Option<T>,
    degree: usize,
) -> Result<ClosedFormSolution<T>> {
    let grid = *ensemble.grid();
    let horizon = grid.horizon();
    let values = terminal.evaluate(ensemble)?;
    let mean = MeanInfo::of_terminal(terminal, horizon.as_f64(), &values);
    let zsq = terminal.candidate_z_square_integrable(horizon.as_f64());
    let class = classify_example2(horizon.as_f64(), k.as_f64(), mean, zsq);
    let y0 = T::lit(resolve_y0(&class, y0_override.map(|v| v.as_f64()))?);
    let m = representation_integrand(terminal, &values, ensemble, degree)?;

    let n = grid.steps();
    let np = ensemble.n_paths();
    let positive = k > T::zero();
    let w = k.abs().sqrt();
    // kernel(t) = c(t) with c = cos or cosh; c(t - s) = c(t)c(s) -+ s(t)s(s)
    let c = |t: T| if positive { (w * t).cos() } else { (w * t).cosh() };
    let s = |t: T| if positive { (w * t).sin() } else { (w * t).sinh() };
    let sign = if positive { T::one() } else { -T::one() };

    let mut z = vec![T::zero(); n * np];
    let singular_tol = T::lit(1e-8);
    for i in 0..n {
        let t = grid.time(i);
        let denom = c(horizon - t);
        if denom.abs() < singular_tol {
            if i == 0 && n > 1 {
                // boundary case: Z(0) taken as the limit from the right
                continue;
            }
            return Err(Error::Singularity {
                time: t.as_f64(),
                detail: format!("cos((T - t) sqrt(K)) = {denom}"),
            });
        }
        z[i * np..(i + 1) * np]
            .par_iter_mut()
            .zip(m[i * np..(i + 1) * np].par_iter())
            .for_each(|(zi, &mi)| *zi = mi / denom);
    }
    if c(horizon).abs() < singular_tol && n > 1 {
        let (head, tail) = z.split_at_mut(np);
        head.copy_from_slice(&tail[..np]);
    }

    let mut a = vec![T::zero(); np];
    let mut b = vec![T::zero(); np];
    let mut y = vec![T::zero(); (n + 1) * np];
    for i in 0..=n {
        if i > 0 {
            let tm = grid.time(i - 1);
            let (cm, sm) = (c(tm), s(tm));
            let dw = ensemble.increments_at(i - 1);
            let zm = &z[(i - 1) * np..i * np];
            a.par_iter_mut()
                .zip(b.par_iter_mut())
                .enumerate()
                .for_each(|(p, (ap, bp))| {
                    let inc = zm[p] * dw[p];
                    *ap += cm * inc;
                    *bp += sm * inc;
                });
        }
        let t = grid.time(i);
        let (ct, st) = (c(t), s(t));
        y[i * np..(i + 1) * np]
            .par_iter_mut()
            .enumerate()
            .for_each(|(p, v)| *v = y0 * ct + ct * a[p] + sign * st * b[p]);
    }
    y[n * np..].copy_from_slice(&values);
    Ok(ClosedFormSolution {
        solution: GridSolution::new(grid, np, y, z)?,
        classification: class,
        terminal: values,
        generator: Generator::uniform_integral_y(k, horizon)?,
    })
}

/// Solution of a linear delayed-`Z` equation built under the shifted
/// measure.
#[derive(Debug, Clone)]
pub struct LinearZSolution<T> {
    pub solution: GridSolution<T>,
    /// Paths simulated under the shifted measure; `brownian_at` gives `W`.
    pub ensemble: PathEnsemble<T>,
    pub drift: DriftSpec<T>,
    pub terminal: Vec<T>,
    pub generator: Generator<T>,
    /// Control-variate estimate of `E^Q[xi]`.
    pub q_mean: T,
    pub regularized: usize,
}

/// Generator `int g(t + u) Z(t + u) alpha(du)`:
/// `Y(t) = E^Q[xi | F_t] + int_0^t alpha((s - T, s - t]) g(s) Z(s) ds` with
/// `Z` from the representation under the measure with drift
/// `alpha((s - T, 0]) g(s)`. Both masses are the discrete ones of the grid
/// weights, which makes the grid solution satisfy the discrete dynamics.
pub fn solve_linear_z<T: Scalar>(
    terminal: &TerminalSpec,
    grid: &TimeGrid<T>,
    n_paths: usize,
    seed: u64,
    g: &GFunction<T>,
    measure: &DelayMeasure<T>,
    degree: usize,
) -> Result<LinearZSolution<T>> {
    let generator = Generator::linear_delayed_z(g.clone(), measure.clone())?;
    let weights = generator.grid_weights(grid)?;
    let drift = DriftSpec::linear_delay(&weights, g)?;
    let ensemble = q_shifted_ensemble(grid, n_paths, seed, &drift)?;
    let values = terminal.evaluate(&ensemble)?;
    let basis = terminal.basis(degree, &ensemble)?;
    let rep = martingale_representation(&ensemble, &values, &basis)?;

    let n = grid.steps();
    let np = n_paths;
    let dt = grid.dt();
    let mut y = rep.martingale;
    for i in 1..n {
        for m in 0..i {
            let coef = dt * weights.window(m, i) * g.value(m);
            if coef == T::zero() {
                continue;
            }
            let (zs, row) = (&rep.z[m * np..(m + 1) * np], &mut y[i * np..(i + 1) * np]);
            row.par_iter_mut()
                .zip(zs.par_iter())
                .for_each(|(v, &zv)| *v += coef * zv);
        }
    }
    y[n * np..].copy_from_slice(&values);
    Ok(LinearZSolution {
        solution: GridSolution::new(*grid, np, y, rep.z)?,
        ensemble,
        drift,
        terminal: values,
        generator,
        q_mean: rep.mean,
        regularized: rep.regularized,
    })
}

/// Generator `K Z(t - r)`: constant drift `K` on `[0, T - r)`, none after,
/// and `Y(t) = E^Q[xi | F_t] + K int_{(t-r) v 0}^{t ^ (T-r)} Z(s) ds`.
pub fn solve_dirac_z<T: Scalar>(
    terminal: &TerminalSpec,
    grid: &TimeGrid<T>,
    n_paths: usize,
    seed: u64,
    k: T,
    delay: T,
    degree: usize,
) -> Result<LinearZSolution<T>> {
    let horizon = grid.horizon();
    if !(delay >= T::zero() && delay <= horizon) {
        return Err(invalid(format!("delay {delay} outside [0, {horizon}]")));
    }
    let measure = DelayMeasure::dirac(horizon, delay)?;
    let weights = measure.discretize(grid)?;
    let lag = weights.support().map(|(j, _)| j).next().unwrap_or(0);
    let n = grid.steps();
    let cut = n - lag;
    let drift = DriftSpec::from_values((0..n).map(|m| if m < cut { k } else { T::zero() }).collect())?;
    let ensemble = q_shifted_ensemble(grid, n_paths, seed, &drift)?;
    let values = terminal.evaluate(&ensemble)?;
    let basis = terminal.basis(degree, &ensemble)?;
    let rep = martingale_representation(&ensemble, &values, &basis)?;

    let np = n_paths;
    let dt = grid.dt();
    // prefix[i] = sum_{m < i} Z_m
    let mut prefix = vec![T::zero(); (n + 1) * np];
    for i in 0..n {
        let (done, rest) = prefix.split_at_mut((i + 1) * np);
        let prev = &done[i * np..];
        let zi = &rep.z[i * np..(i + 1) * np];
        rest[..np]
            .par_iter_mut()
            .enumerate()
            .for_each(|(p, v)| *v = prev[p] + zi[p]);
    }
    let mut y = rep.martingale;
    for i in 1..n {
        let hi = i.min(cut);
        let lo = i.saturating_sub(lag);
        if hi <= lo {
            continue;
        }
        let kd = k * dt;
        let (ph, pl) = (&prefix[hi * np..(hi + 1) * np], &prefix[lo * np..(lo + 1) * np]);
        y[i * np..(i + 1) * np]
            .par_iter_mut()
            .enumerate()
            .for_each(|(p, v)| *v += kd * (ph[p] - pl[p]));
    }
    y[n * np..].copy_from_slice(&values);
    Ok(LinearZSolution {
        solution: GridSolution::new(*grid, np, y, rep.z)?,
        ensemble,
        drift,
        terminal: values,
        generator: Generator::linear_delayed_z(GFunction::Constant(k), measure)?,
        q_mean: rep.mean,
        regularized: rep.regularized,
    })
}

/// Explicit solution of `Y(t) = xi + int_t^T int_0^s Z(u) du ds - int_t^T Z dW`
/// with `xi = int_0^T cos s dW(s)`: `Z(t) = cos t`,
/// `Y(t) = int_0^t cos s dW(s) + cos t - cos T`.
pub fn example6_solution<T: Scalar>(ensemble: &PathEnsemble<T>) -> Result<ClosedFormSolution<T>> {
    let grid = *ensemble.grid();
    let n = grid.steps();
    let np = ensemble.n_paths();
    let horizon = grid.horizon();
    let spec = TerminalSpec::CosIntegral;
    let x = spec.auxiliary_state(ensemble).expect("cos integral has a state");
    let cos_t = horizon.cos();
    let mut y = x;
    for i in 0..n {
        let shift = grid.time(i).cos() - cos_t;
        y[i * np..(i + 1) * np].par_iter_mut().for_each(|v| *v += shift);
    }
    let mut z = Vec::with_capacity(n * np);
    for i in 0..n {
        z.extend(std::iter::repeat(grid.time(i).cos()).take(np));
    }
    let terminal = y[n * np..].to_vec();
    let generator = Generator::linear_delayed_z(GFunction::Constant(horizon), DelayMeasure::uniform(horizon)?)?;
    Ok(ClosedFormSolution {
        solution: GridSolution::new(grid, np, y, z)?,
        classification: ExistenceClass {
            verdict: Verdict::Unique,
            product: 0.0,
            threshold: 0.0,
            mean: MeanInfo::Exact { value: 0.0 },
            mean_interval: None,
            z_square_integrable: Some(true),
            y0: Some(1.0 - cos_t.as_f64()),
            certified: true,
            condition: "linear generator int_0^t Z(u) du with a square integrable solution".into(),
        },
        terminal,
        generator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example1_table() {
        let e = MeanInfo::Exact { value: 1.0 };
        let z = MeanInfo::Exact { value: 0.0 };
        assert_eq!(classify_example1(1.0, 1.0, e).verdict, Verdict::NoSolution);
        assert_eq!(classify_example1(1.0, 1.0, z).verdict, Verdict::Multiple);
        let c = classify_example1(1.0, 0.5, e);
        assert_eq!(c.verdict, Verdict::Unique);
        assert_eq!(c.y0, Some(2.0));
        let straddle = MeanInfo::Sampled {
            estimate: Estimate {
                value: 0.001,
                stderr: 0.01,
            },
        };
        assert_eq!(classify_example1(1.0, 1.0, straddle).verdict, Verdict::Indeterminate);
    }

    #[test]
    fn example2_table() {
        let hp = std::f64::consts::FRAC_PI_2;
        let z = MeanInfo::Exact { value: 0.0 };
        let one = MeanInfo::Exact { value: 1.0 };
        assert_eq!(classify_example2(hp, 1.0, z, Some(false)).verdict, Verdict::NoSolution);
        assert_eq!(classify_example2(hp, 1.0, z, Some(true)).verdict, Verdict::Multiple);
        assert_eq!(classify_example2(hp, 1.0, one, Some(true)).verdict, Verdict::NoSolution);
        let u = classify_example2(1.0, 1.0, one, Some(true));
        assert_eq!(u.verdict, Verdict::Unique);
        assert!((u.y0.unwrap() - 1.0 / 1f64.cos()).abs() < 1e-15);
        let n = classify_example2(2.0, -1.0, one, None);
        assert_eq!(n.verdict, Verdict::Unique);
        assert!((n.y0.unwrap() - 1.0 / 2f64.cosh()).abs() < 1e-15);
        let beyond = classify_example2(2.0, 1.0, one, None);
        assert_eq!(beyond.verdict, Verdict::MultipleOrNone);
        assert!(!beyond.certified);
    }

    #[test]
    fn terminal_means() {
        let t = 2.0;
        assert_eq!(TerminalSpec::ShiftedSquare { shift: 2.0 }.mean(t), Some(6.0));
        assert_eq!(TerminalSpec::StoppedMartingale.mean(t), None);
        assert_eq!(TerminalSpec::Brownian { scale: 1.0, shift: 0.0 }.candidate_z_square_integrable(t), Some(false));
        assert_eq!(TerminalSpec::CosKernel.candidate_z_square_integrable(std::f64::consts::FRAC_PI_2), Some(true));
        assert_eq!(TerminalSpec::CosKernel.candidate_z_square_integrable(t), Some(false));
    }
}

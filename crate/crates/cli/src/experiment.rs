//! The reproducible experiments behind `reproduce`, their parameters and the
//! closed-form and Picard pipelines shared with `solve` and `classify`.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tdbsde::closed_form::example6_solution;
use tdbsde::experiments::{
    bmo_refinement, comparison_failure_experiment, measure_collapse_experiment, stopped_comparison,
    stopped_measure_solution, unboundedness_experiment, Table,
};
use tdbsde::{
    classify_example1, classify_example2, density, optimize_beta, picard_solve_from, q_expectation,
    q_shifted_ensemble, regression_tolerance, residual_check, simulate_paths, solve_dirac_z, solve_example1,
    solve_example2, solve_linear_z, ClosedFormSolution, ConvergenceReport, ConvergenceVerdict, DelayMeasure64,
    DriftSpec64, Error, Estimate, ExistenceClass, ExperimentReport, ExperimentVerdict, GFunction, Generator64,
    GridSolution64, MeanInfo, PathEnsemble64, SolverConfig64, TerminalSpec, TimeGrid64, Verdict,
};

use crate::config::Param;
use crate::exit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Example1,
    Example2,
    LinearUniform,
    LinearDirac,
    Bmo,
    Unbounded,
    Comparison,
    MeasureCollapse,
    StoppedComparison,
    StoppedMeasure,
    Girsanov,
}

#[derive(Debug, Clone, Copy)]
enum ParamDefault {
    Num(f64),
    Text(&'static str),
    /// Optional parameter without a default.
    Unset,
}

use ParamDefault::{Num, Text, Unset};

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Example1 => "example1",
            Experiment::Example2 => "example2",
            Experiment::LinearUniform => "linear-uniform",
            Experiment::LinearDirac => "linear-dirac",
            Experiment::Bmo => "bmo",
            Experiment::Unbounded => "unbounded",
            Experiment::Comparison => "comparison",
            Experiment::MeasureCollapse => "measure-collapse",
            Experiment::StoppedComparison => "stopped-comparison",
            Experiment::StoppedMeasure => "stopped-measure",
            Experiment::Girsanov => "girsanov",
        }
    }

    pub fn default_steps(self) -> usize {
        match self {
            Experiment::Example2 | Experiment::Unbounded | Experiment::Comparison | Experiment::StoppedMeasure => 100,
            Experiment::StoppedComparison => 25,
            Experiment::MeasureCollapse => 1,
            _ => 50,
        }
    }

    pub fn default_paths(self) -> usize {
        match self {
            Experiment::MeasureCollapse => 1_000_000,
            _ => 100_000,
        }
    }

    fn params(self) -> &'static [(&'static str, ParamDefault)] {
        match self {
            Experiment::Example1 => &[
                ("horizon", Num(1.0)),
                ("k", Num(0.5)),
                ("terminal", Text("brownian:1:1")),
                ("y0", Unset),
                ("degree", Num(3.0)),
                ("max_iterations", Num(60.0)),
            ],
            Experiment::Example2 => &[
                ("horizon", Num(1.0)),
                ("k", Num(1.0)),
                ("terminal", Text("constant:1")),
                ("y0", Unset),
                ("degree", Num(3.0)),
                ("max_iterations", Num(60.0)),
            ],
            Experiment::LinearUniform => &[
                ("horizon", Num(1.0)),
                ("k", Num(0.5)),
                ("terminal", Text("brownian:1:0")),
                ("degree", Num(2.0)),
            ],
            Experiment::LinearDirac => &[
                ("horizon", Num(1.0)),
                ("k", Num(0.5)),
                ("lag", Num(0.5)),
                ("terminal", Text("brownian:1:0")),
                ("degree", Num(2.0)),
            ],
            Experiment::Bmo => &[
                ("horizon", Num(1.0)),
                ("g", Num(1.0)),
                ("terminal", Text("sin_brownian")),
                ("degree", Num(3.0)),
            ],
            Experiment::Unbounded => &[("threshold", Num(5.0))],
            Experiment::Comparison => &[("horizon", Num(1.0)), ("t", Num(0.5))],
            Experiment::MeasureCollapse => &[("n", Num(50.0))],
            Experiment::StoppedComparison => &[
                ("horizon", Num(0.25)),
                ("g", Num(0.5)),
                ("c", Num(0.1)),
                ("n", Num(100.0)),
                ("terminal", Text("brownian:1:0")),
                ("degree", Num(3.0)),
            ],
            Experiment::StoppedMeasure => &[("horizon", Num(FRAC_PI_2)), ("n", Num(5.0)), ("degree", Num(2.0))],
            Experiment::Girsanov => &[("horizon", Num(1.0)), ("k", Num(1.0))],
        }
    }

    /// Rejects unknown parameter names and values of the wrong kind.
    pub fn check_params(self, given: &BTreeMap<String, Param>) -> Result<(), String> {
        let spec = self.params();
        for (key, value) in given {
            let Some((_, d)) = spec.iter().find(|(k, _)| k == key) else {
                let known: Vec<&str> = spec.iter().map(|(k, _)| *k).collect();
                return Err(format!(
                    "unknown parameter `{key}` for {}; known: {}",
                    self.name(),
                    known.join(", ")
                ));
            };
            match (d, value) {
                (Text(_), Param::Text(s)) => {
                    parse_terminal(s)?;
                }
                (Text(_), Param::Number(_)) => return Err(format!("parameter `{key}` takes a terminal value")),
                (Num(_) | Unset, Param::Text(s)) => return Err(format!("parameter `{key}` must be a number, got `{s}`")),
                (Num(_) | Unset, Param::Number(v)) if !v.is_finite() => {
                    return Err(format!("parameter `{key}` must be finite"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Given parameters completed with the defaults.
    pub fn resolve(self, given: &BTreeMap<String, Param>) -> BTreeMap<String, Param> {
        let mut out = BTreeMap::new();
        for (key, d) in self.params() {
            let value = match (given.get(*key), d) {
                (Some(v), _) => Some(v.clone()),
                (None, Num(v)) => Some(Param::Number(*v)),
                (None, Text(s)) => Some(Param::Text(s.to_string())),
                (None, Unset) => None,
            };
            if let Some(v) = value {
                out.insert(key.to_string(), v);
            }
        }
        out
    }
}

/// Terminal values written as `constant:<v>`, `brownian:<scale>:<shift>`,
/// `w` (plain `W(T)`), `shifted_square:<shift>`, `sin_brownian`,
/// `cos_integral`, `cos_kernel` or `stopped_martingale`.
pub fn parse_terminal(text: &str) -> Result<TerminalSpec, String> {
    let parts: Vec<&str> = text.trim().split(':').collect();
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("bad number `{s}` in terminal `{text}`"))
    };
    let spec = match parts.as_slice() {
        ["constant", v] => TerminalSpec::Constant { value: num(v)? },
        ["w"] => TerminalSpec::Brownian { scale: 1.0, shift: 0.0 },
        ["brownian", a, b] => TerminalSpec::Brownian {
            scale: num(a)?,
            shift: num(b)?,
        },
        ["shifted_square", s] => TerminalSpec::ShiftedSquare { shift: num(s)? },
        ["sin_brownian"] => TerminalSpec::SinBrownian,
        ["cos_integral"] => TerminalSpec::CosIntegral,
        ["cos_kernel"] => TerminalSpec::CosKernel,
        ["stopped_martingale"] => TerminalSpec::StoppedMartingale,
        _ => return Err(format!("unknown terminal `{text}`")),
    };
    Ok(spec)
}

/// Resolved parameters with typed access.
struct Params<'a>(&'a BTreeMap<String, Param>);

impl Params<'_> {
    fn num(&self, key: &str) -> f64 {
        match self.0.get(key) {
            Some(Param::Number(v)) => *v,
            _ => f64::NAN,
        }
    }

    fn opt(&self, key: &str) -> Option<f64> {
        match self.0.get(key) {
            Some(Param::Number(v)) => Some(*v),
            _ => None,
        }
    }

    fn count(&self, key: &str) -> Result<usize, Error> {
        let v = self.num(key);
        if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::InvalidArgument(format!("{key} must be a nonnegative integer, got {v}")))
        }
    }

    fn terminal(&self) -> Result<TerminalSpec, Error> {
        match self.0.get("terminal") {
            Some(Param::Text(s)) => parse_terminal(s).map_err(Error::InvalidArgument),
            _ => Err(Error::InvalidArgument("missing terminal".into())),
        }
    }
}

/// Sampling budget of a run.
#[derive(Debug, Clone, Copy)]
pub struct Budget {
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
}

/// Everything a pipeline produces before it is written out.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: ExperimentReport,
    pub classification: Option<ExistenceClass>,
    pub convergence: Option<ConvergenceReport>,
    pub exit_code: i32,
    pub timings: Vec<(String, f64)>,
}

impl Outcome {
    fn new(report: ExperimentReport) -> Self {
        Self {
            report,
            classification: None,
            convergence: None,
            exit_code: exit::OK,
            timings: Vec::new(),
        }
    }

    fn timed<R>(&mut self, phase: &str, f: impl FnOnce() -> R) -> R {
        let start = Instant::now();
        let out = f();
        self.timings.push((phase.to_string(), start.elapsed().as_secs_f64()));
        out
    }

    /// Verdict from the checks and exit code from the strongest signal:
    /// classified non-existence, then divergence, then inconclusive, then
    /// failed checks.
    fn settle(&mut self, inconclusive: bool) {
        let r = &mut self.report;
        r.verdict = if inconclusive {
            ExperimentVerdict::Inconclusive
        } else if r.all_passed() {
            ExperimentVerdict::Pass
        } else {
            ExperimentVerdict::Fail
        };
        let no_solution = self
            .classification
            .as_ref()
            .is_some_and(|c| c.verdict == Verdict::NoSolution);
        let picard = self.convergence.as_ref().map(|c| c.verdict);
        self.exit_code = if no_solution {
            exit::NO_SOLUTION
        } else if picard == Some(ConvergenceVerdict::Diverged) {
            exit::DIVERGED
        } else if r.verdict == ExperimentVerdict::Inconclusive || picard == Some(ConvergenceVerdict::MaxIterations) {
            exit::INCONCLUSIVE
        } else if r.verdict == ExperimentVerdict::Fail {
            exit::FAILED
        } else {
            exit::OK
        };
    }
}

fn p_ensemble(horizon: f64, b: Budget) -> Result<PathEnsemble64, Error> {
    simulate_paths(&TimeGrid64::new(horizon, b.steps)?, b.paths, b.seed, None)
}

fn solution_table(sol: &GridSolution64) -> Table {
    let grid = sol.grid();
    let n = grid.steps();
    let mut t = Table::new(&["t", "mean_y", "stderr_y", "mean_z"]);
    for i in 0..=n {
        let z = if i < n { sol.mean_z(i) } else { f64::NAN };
        t.push(vec![grid.time(i), sol.mean_y(i), sol.stderr_y(i), z]);
    }
    t
}

/// Which generator family a closed-form pipeline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClosedFamily {
    /// `K Y(t - T)`.
    FixedDelay,
    /// `K int_0^t Y(s) ds`.
    IntegralY,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PicardWhen {
    Always,
    IfUnique,
    /// Skipped when `Y(0)` is a free choice and the iterates drift with the
    /// sampled mean.
    UnlessMultiple,
    Never,
}

/// Classification, closed-form solution and optionally the Picard solver for
/// the two generator families with explicit solutions.
#[allow(clippy::too_many_arguments)]
pub fn closed_form_pipeline(
    id: &str,
    family: ClosedFamily,
    horizon: f64,
    k: f64,
    spec: &TerminalSpec,
    y0: Option<f64>,
    budget: Budget,
    solver: &SolverConfig64,
    picard: PicardWhen,
) -> Result<Outcome, Error> {
    let mut out = Outcome::new(ExperimentReport::new(id, budget.seed));
    out.report.config.insert("horizon".into(), horizon);
    out.report.config.insert("k".into(), k);
    let e = out.timed("paths", || p_ensemble(horizon, budget))?;
    let xi = spec.evaluate(&e)?;
    let mean = MeanInfo::of_terminal(spec, horizon, &xi);
    let (class, gen) = match family {
        ClosedFamily::FixedDelay => (classify_example1(horizon, k, mean), Generator64::fixed_delay_y(k, horizon)?),
        ClosedFamily::IntegralY => (
            classify_example2(horizon, k, mean, spec.candidate_z_square_integrable(horizon)),
            Generator64::uniform_integral_y(k, horizon)?,
        ),
    };
    let (beta_star, delta_star) = optimize_beta(horizon, gen.lipschitz_constant(), &gen.measure())?;
    out.report.values.insert("beta_star".into(), beta_star);
    out.report.values.insert("delta_star".into(), delta_star);
    out.report.values.insert("product".into(), class.product);
    if let Some(v) = class.y0 {
        out.report.values.insert("classified_y0".into(), v);
    }

    let tol = regression_tolerance(budget.paths);
    let solved = out.timed("closed_form", || match family {
        ClosedFamily::FixedDelay => solve_example1(spec, &e, k, y0, solver.degree),
        ClosedFamily::IntegralY => solve_example2(spec, &e, k, y0, solver.degree),
    });
    let mut inconclusive = false;
    match solved {
        Ok(s) => closed_form_checks(&mut out.report, &s, &e, tol)?,
        Err(Error::NoSolution(m)) => out.report.notes.push(format!("no solution: {m}")),
        Err(Error::Refused(m)) => {
            out.report.notes.push(format!("closed form refused: {m}"));
            inconclusive = !(class.verdict == Verdict::Multiple && y0.is_none());
        }
        Err(e) => return Err(e),
    }
    if matches!(class.verdict, Verdict::MultipleOrNone | Verdict::Indeterminate) {
        inconclusive = true;
    }

    let run_picard = match picard {
        PicardWhen::Always => true,
        PicardWhen::IfUnique => class.verdict == Verdict::Unique,
        PicardWhen::UnlessMultiple => class.verdict != Verdict::Multiple,
        PicardWhen::Never => false,
    };
    if run_picard {
        let basis = spec.basis(solver.degree, &e)?;
        let res = out.timed("picard", || {
            picard_solve_from(&gen, &xi, &e, solver, &basis, GridSolution64::zeros(*e.grid(), e.n_paths()))
        })?;
        picard_summary(&mut out.report, &res.report);
        out.report.values.insert("picard_y0".into(), res.solution.mean_y(0));
        if let (Some(target), ConvergenceVerdict::Converged) = (class.y0, res.report.verdict) {
            let got = res.solution.mean_y(0);
            let rel = (got - target).abs() / target.abs().max(f64::MIN_POSITIVE);
            out.report.values.insert("picard_relative_error".into(), rel);
            out.report.check(
                "picard_matches_closed_form",
                rel <= 0.02,
                format!("Picard Y(0) = {got}, closed form {target}"),
            );
        }
        out.report.tables.insert("picard_solution".into(), solution_table(&res.solution));
        out.convergence = Some(res.report.clone());
        out.report.solver_reports.push(res.report);
    }
    out.classification = Some(class);
    out.settle(inconclusive);
    Ok(out)
}

fn closed_form_checks(
    r: &mut ExperimentReport,
    s: &ClosedFormSolution<f64>,
    e: &PathEnsemble64,
    tol: f64,
) -> Result<(), Error> {
    let res = residual_check(&s.solution, &s.generator, &s.terminal, e)?;
    r.values.insert("closed_form_y0".into(), s.solution.mean_y(0));
    r.values.insert("residual_max_step_rms".into(), res.max_step_rms);
    r.values.insert("residual_terminal_mismatch".into(), res.terminal_mismatch);
    r.values.insert("regression_tolerance".into(), tol);
    r.check(
        "closed_form_residual",
        res.passes(tol),
        format!(
            "max step rms {:.3e}, terminal mismatch {:.1e}, tolerance {tol:.3e}",
            res.max_step_rms, res.terminal_mismatch
        ),
    );
    r.tables.insert("closed_form".into(), solution_table(&s.solution));
    Ok(())
}

/// Iteration table and the increments of the `Y^n(0)` trace.
fn picard_summary(r: &mut ExperimentReport, rep: &ConvergenceReport) {
    let mut t = Table::new(&["iteration", "y0", "y_norm_sq", "z_norm_sq", "y_mean_square", "z_mean_square"]);
    for rec in &rep.records {
        t.push(vec![
            rec.iteration as f64,
            rec.y0,
            rec.y_norm_sq,
            rec.z_norm_sq,
            rec.y_mean_square,
            rec.z_mean_square,
        ]);
    }
    r.tables.insert("iterations".into(), t);
    let trace = rep.y0_trace();
    let inc: Vec<f64> = trace.windows(2).map(|w| w[1] - w[0]).collect();
    let ratios: Vec<f64> = inc.windows(2).filter(|w| w[0] != 0.0).map(|w| w[1] / w[0]).collect();
    let range = |v: &[f64], name: &str, r: &mut ExperimentReport| {
        if !v.is_empty() {
            r.values.insert(format!("{name}_min"), v.iter().copied().fold(f64::INFINITY, f64::min));
            r.values.insert(format!("{name}_max"), v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
    };
    range(&inc, "y0_increment", r);
    range(&ratios, "y0_ratio", r);
    if let Some(m) = rep.max_ratio() {
        r.values.insert("max_norm_ratio".into(), m);
    }
    r.values.insert("picard_iterations".into(), rep.iterations as f64);
}

/// Generic Picard run for the `solve` pipeline.
pub fn solve_pipeline(
    gen: &Generator64,
    spec: &TerminalSpec,
    horizon: f64,
    budget: Budget,
    solver: &SolverConfig64,
) -> Result<Outcome, Error> {
    let mut out = Outcome::new(ExperimentReport::new("solve", budget.seed));
    out.report.config.insert("horizon".into(), horizon);
    let e = out.timed("paths", || p_ensemble(horizon, budget))?;
    let xi = spec.evaluate(&e)?;
    let basis = spec.basis(solver.degree, &e)?;
    let res = out.timed("picard", || {
        picard_solve_from(gen, &xi, &e, solver, &basis, GridSolution64::zeros(*e.grid(), e.n_paths()))
    })?;
    out.report.values.insert("beta_star".into(), res.report.beta_star);
    out.report.values.insert("delta_star".into(), res.report.delta_bound);
    out.report.values.insert("picard_y0".into(), res.solution.mean_y(0));
    out.report
        .estimates
        .insert("y0".into(), Estimate::of(res.solution.y_at(0)));
    picard_summary(&mut out.report, &res.report);
    if res.report.verdict == ConvergenceVerdict::Converged {
        let tol = regression_tolerance(budget.paths);
        let rc = out.timed("residual", || residual_check(&res.solution, gen, &xi, &e))?;
        out.report.values.insert("residual_max_step_rms".into(), rc.max_step_rms);
        out.report.check(
            "residual",
            rc.passes(tol),
            format!("max step rms {:.3e}, tolerance {tol:.3e}", rc.max_step_rms),
        );
    }
    out.report.tables.insert("solution".into(), solution_table(&res.solution));
    out.convergence = Some(res.report.clone());
    out.report.solver_reports.push(res.report);
    out.settle(false);
    Ok(out)
}

/// Runs one experiment with resolved parameters.
pub fn reproduce(exp: Experiment, params: &BTreeMap<String, Param>, budget: Budget) -> Result<Outcome, Error> {
    let p = Params(params);
    let solver = |p: &Params| -> Result<SolverConfig64, Error> {
        Ok(SolverConfig64 {
            degree: p.count("degree")?,
            max_iterations: p.count("max_iterations")?,
            ..SolverConfig64::default()
        })
    };
    let degree = || p.count("degree");
    match exp {
        Experiment::Example1 => closed_form_pipeline(
            exp.name(),
            ClosedFamily::FixedDelay,
            p.num("horizon"),
            p.num("k"),
            &p.terminal()?,
            p.opt("y0"),
            budget,
            &solver(&p)?,
            PicardWhen::UnlessMultiple,
        ),
        Experiment::Example2 => closed_form_pipeline(
            exp.name(),
            ClosedFamily::IntegralY,
            p.num("horizon"),
            p.num("k"),
            &p.terminal()?,
            p.opt("y0"),
            budget,
            &solver(&p)?,
            PicardWhen::IfUnique,
        ),
        Experiment::LinearUniform => linear_uniform(p.num("horizon"), p.num("k"), &p.terminal()?, degree()?, budget),
        Experiment::LinearDirac => linear_dirac(
            p.num("horizon"),
            p.num("k"),
            p.num("lag"),
            &p.terminal()?,
            degree()?,
            budget,
        ),
        Experiment::Bmo => wrap(exp, budget, |b| {
            let h = p.num("horizon");
            bmo_refinement(
                &p.terminal()?,
                h,
                p.num("g"),
                &DelayMeasure64::uniform(h)?,
                b.steps,
                b.paths,
                b.seed,
                degree()?,
            )
        }),
        Experiment::Unbounded => wrap(exp, budget, |b| {
            unboundedness_experiment(b.steps, b.paths, b.seed, p.num("threshold"), &[0.9, 0.95, 0.99])
        }),
        Experiment::Comparison => wrap(exp, budget, |b| {
            comparison_failure_experiment(p.num("horizon"), b.steps, b.paths, b.seed, p.num("t"))
        }),
        Experiment::MeasureCollapse => wrap(exp, budget, |b| {
            measure_collapse_experiment(p.count("n")?, b.paths, b.seed)
        }),
        Experiment::StoppedMeasure => wrap(exp, budget, |b| {
            let e = p_ensemble(p.num("horizon"), b)?;
            let s = example6_solution(&e)?;
            let basis = TerminalSpec::CosIntegral.basis(degree()?, &e)?;
            stopped_measure_solution(&s.solution, &s.generator, &e, p.num("n"), &basis)
        }),
        Experiment::StoppedComparison => wrap(exp, budget, |b| {
            let h = p.num("horizon");
            let e = p_ensemble(h, b)?;
            let xi = p.terminal()?.evaluate(&e)?;
            let lower = Generator64::linear_delayed_z(GFunction::Constant(p.num("g")), DelayMeasure64::uniform(h)?)?;
            let upper = lower.with_offset(p.num("c"))?;
            let cfg = SolverConfig64 {
                degree: degree()?,
                ..SolverConfig64::default()
            };
            stopped_comparison(&upper, &lower, &xi, &e, p.num("n"), &cfg)
        }),
        Experiment::Girsanov => girsanov(p.num("horizon"), p.num("k"), budget),
    }
}

/// Runs a core experiment and keeps its verdict.
fn wrap(
    exp: Experiment,
    budget: Budget,
    f: impl FnOnce(Budget) -> Result<ExperimentReport, Error>,
) -> Result<Outcome, Error> {
    let mut out = Outcome::new(ExperimentReport::new(exp.name(), budget.seed));
    out.report = out.timed(exp.name(), || f(budget))?;
    let inconclusive = out.report.verdict == ExperimentVerdict::Inconclusive;
    out.settle(inconclusive);
    Ok(out)
}

/// Uniform delay, `g = K T`: explicit `Y = W + K (T^2 - t^2) / 2`, `Z = 1`
/// against the solution built under the shifted measure.
fn linear_uniform(horizon: f64, k: f64, spec: &TerminalSpec, degree: usize, budget: Budget) -> Result<Outcome, Error> {
    let mut out = Outcome::new(ExperimentReport::new("linear-uniform", budget.seed));
    out.report.config.insert("horizon".into(), horizon);
    out.report.config.insert("k".into(), k);
    let grid = TimeGrid64::new(horizon, budget.steps)?;
    let measure = DelayMeasure64::uniform(horizon)?;
    let g = GFunction::Constant(k * horizon);
    let s = out.timed("solve_linear_z", || {
        solve_linear_z(spec, &grid, budget.paths, budget.seed, &g, &measure, degree)
    })?;
    let tol = regression_tolerance(budget.paths);
    let rc = residual_check(&s.solution, &s.generator, &s.terminal, &s.ensemble)?;
    out.report.values.insert("residual_max_step_rms".into(), rc.max_step_rms);
    out.report.check(
        "residual",
        rc.passes(tol),
        format!("max step rms {:.3e}, tolerance {tol:.3e}", rc.max_step_rms),
    );

    let n = grid.steps();
    let explicit_shift = |i: usize| {
        let t = grid.time(i);
        k * (horizon * horizon - t * t) / 2.0
    };
    if *spec == (TerminalSpec::Brownian { scale: 1.0, shift: 0.0 }) {
        // pathwise check of the explicit solution under the original measure
        let e = p_ensemble(horizon, budget)?;
        let np = e.n_paths();
        let mut y = Vec::with_capacity((n + 1) * np);
        for i in 0..=n {
            let c = explicit_shift(i);
            y.extend(e.brownian_at(i).iter().map(|w| w + c));
        }
        let explicit = GridSolution64::new(grid, np, y, vec![1.0; n * np])?;
        let xi = e.brownian_at(n).to_vec();
        let ex = residual_check(&explicit, &s.generator, &xi, &e)?;
        out.report.values.insert("explicit_residual_max_abs".into(), ex.max_abs);
        out.report.check(
            "explicit_residual",
            ex.max_abs <= 1e-12 && ex.terminal_mismatch == 0.0,
            format!("max abs residual {:.3e}", ex.max_abs),
        );

        // path means of the explicit solution on the shifted paths
        let mut table = Table::new(&["t", "explicit_mean", "solver_mean", "relative_error"]);
        let mut worst = 0.0f64;
        for i in 0..=n {
            let w = Estimate::of(s.ensemble.brownian_at(i)).value;
            let target = w + explicit_shift(i);
            let got = s.solution.mean_y(i);
            let rel = (got - target).abs() / target.abs();
            worst = worst.max(rel);
            table.push(vec![grid.time(i), target, got, rel]);
        }
        out.report.values.insert("max_mean_relative_error".into(), worst);
        out.report.check(
            "path_means",
            worst <= 0.02,
            format!("worst relative error of path means {worst:.3e}"),
        );
        out.report.tables.insert("path_means".into(), table);
    } else {
        out.report
            .notes
            .push("the explicit solution is only known for the terminal W(T)".into());
    }
    out.report.tables.insert("solution".into(), solution_table(&s.solution));
    out.settle(false);
    Ok(out)
}

/// Fixed delay in `Z`; at lag zero it is compared with the general linear
/// solver for the point mass at zero.
fn linear_dirac(
    horizon: f64,
    k: f64,
    lag: f64,
    spec: &TerminalSpec,
    degree: usize,
    budget: Budget,
) -> Result<Outcome, Error> {
    let mut out = Outcome::new(ExperimentReport::new("linear-dirac", budget.seed));
    out.report.config.insert("horizon".into(), horizon);
    out.report.config.insert("k".into(), k);
    out.report.config.insert("lag".into(), lag);
    let grid = TimeGrid64::new(horizon, budget.steps)?;
    let d = out.timed("solve_dirac_z", || {
        solve_dirac_z(spec, &grid, budget.paths, budget.seed, k, lag, degree)
    })?;
    let tol = regression_tolerance(budget.paths);
    let rc = residual_check(&d.solution, &d.generator, &d.terminal, &d.ensemble)?;
    out.report.values.insert("residual_max_step_rms".into(), rc.max_step_rms);
    out.report.values.insert("regression_tolerance".into(), tol);
    out.report.check(
        "residual",
        rc.passes(tol),
        format!("max step rms {:.3e}, tolerance {tol:.3e}", rc.max_step_rms),
    );
    if lag == 0.0 {
        let s = out.timed("solve_linear_z", || {
            solve_linear_z(
                spec,
                &grid,
                budget.paths,
                budget.seed,
                &GFunction::Constant(k),
                &DelayMeasure64::dirac(horizon, 0.0)?,
                degree,
            )
        })?;
        let n = grid.steps();
        let combined = 3.0 * std::f64::consts::SQRT_2 * tol;
        let gap = (0..=n)
            .map(|i| (s.solution.mean_y(i) - d.solution.mean_y(i)).abs())
            .fold(0.0, f64::max);
        out.report.values.insert("max_mean_gap_to_linear_z".into(), gap);
        out.report.check(
            "matches_linear_z",
            gap <= combined,
            format!("largest gap of path means {gap:.3e}, tolerance {combined:.3e}"),
        );
    }
    out.report.tables.insert("solution".into(), solution_table(&d.solution));
    out.settle(false);
    Ok(out)
}

/// Density of the drift `K (T - s)`: its mean, and `E^Q[W(T)^2]` by shifted
/// paths against reweighted original paths.
fn girsanov(horizon: f64, k: f64, budget: Budget) -> Result<Outcome, Error> {
    let mut out = Outcome::new(ExperimentReport::new("girsanov", budget.seed));
    out.report.config.insert("horizon".into(), horizon);
    out.report.config.insert("k".into(), k);
    let grid = TimeGrid64::new(horizon, budget.steps)?;
    let n = grid.steps();
    let drift = DriftSpec64::from_values((0..n).map(|i| k * (horizon - grid.time(i))).collect())?;
    let e = p_ensemble(horizon, budget)?;
    let dens = out.timed("density", || density(&e, &drift))?;
    let mean = Estimate::of(&dens.terminal());
    let z = mean.z_score(1.0);
    out.report.estimates.insert("density_mean".into(), mean);
    out.report
        .check("density_mean", z.abs() <= 3.0, format!("{mean:?}, z-score {z:.3}"));

    let squares: Vec<f64> = e.brownian_at(n).iter().map(|w| w * w).collect();
    let reweighted = q_expectation(&squares, &dens)?;
    // independent paths for the shifted estimate
    let shifted = q_shifted_ensemble(&grid, budget.paths, budget.seed.wrapping_add(1), &drift)?;
    let direct = Estimate::of(&shifted.brownian_at(n).iter().map(|w| w * w).collect::<Vec<_>>());
    let se = (reweighted.stderr.powi(2) + direct.stderr.powi(2)).sqrt();
    let gap = (reweighted.value - direct.value).abs() / se;
    out.report.estimates.insert("q_second_moment_reweighted".into(), reweighted);
    out.report.estimates.insert("q_second_moment_shifted".into(), direct);
    let exact = {
        let m = drift.cumulative(grid.dt()).last().copied().unwrap_or(0.0);
        horizon + m * m
    };
    out.report.values.insert("q_second_moment_exact".into(), exact);
    out.report.check(
        "shift_matches_reweighting",
        gap <= 3.0,
        format!("gap {gap:.3} combined standard errors"),
    );
    out.settle(false);
    Ok(out)
}

use tdbsde::closed_form::example6_solution;
use tdbsde::*;

fn ensemble(horizon: f64, steps: usize, paths: usize, seed: u64) -> PathEnsemble64 {
    simulate_paths(&TimeGrid::new(horizon, steps).unwrap(), paths, seed, None).unwrap()
}

#[test]
fn fixed_delay_solution_is_exact_on_the_grid() {
    let e = ensemble(1.0, 50, 2000, 3);
    let xi = TerminalSpec::Brownian { scale: 1.0, shift: 0.0 };
    for y0 in [-1.0, 0.0, 2.5] {
        let s = solve_example1(&xi, &e, 1.0, Some(y0), 3).unwrap();
        assert_eq!(s.classification.verdict, Verdict::Multiple);
        assert_eq!(s.solution.y_at(0)[0], y0);
        let r = residual_check(&s.solution, &s.generator, &s.terminal, &e).unwrap();
        assert!(r.max_abs < 1e-12, "residual {}", r.max_abs);
        assert_eq!(r.terminal_mismatch, 0.0);
    }
}

#[test]
fn fixed_delay_refusals() {
    let e = ensemble(1.0, 20, 500, 3);
    let xi = TerminalSpec::Brownian { scale: 1.0, shift: 1.0 };
    assert!(matches!(solve_example1(&xi, &e, 1.0, None, 3), Err(Error::NoSolution(_))));
    let xi0 = TerminalSpec::Brownian { scale: 1.0, shift: 0.0 };
    assert!(matches!(solve_example1(&xi0, &e, 1.0, None, 3), Err(Error::Refused(_))));
    assert!(matches!(solve_example1(&xi0, &e, 0.5, Some(1.0), 3), Err(Error::Refused(_))));
    let u = solve_example1(&xi, &e, 0.5, None, 3).unwrap();
    assert_eq!(u.solution.y_at(0)[0], 2.0);
}

#[test]
fn integral_generator_solution_has_small_residual() {
    let e = ensemble(1.0, 200, 2000, 5);
    for k in [1.0, -1.0, 2.0] {
        // constant terminal: only the time discretization of the kernel
        let s = solve_example2(&TerminalSpec::Constant { value: 1.0 }, &e, k, None, 3).unwrap();
        let r = residual_check(&s.solution, &s.generator, &s.terminal, &e).unwrap();
        assert!(r.max_step_rms < 5e-4, "k = {k}: {}", r.max_step_rms);
        // random terminal: the last step also carries the Euler error of the
        // stochastic integral
        let s = solve_example2(&TerminalSpec::SinBrownian, &e, k, None, 3).unwrap();
        let r = residual_check(&s.solution, &s.generator, &s.terminal, &e).unwrap();
        let interior = r.step_rms[..199].iter().copied().fold(0.0, f64::max);
        assert!(interior < 1e-3, "k = {k}: {interior}");
        assert!(r.max_step_rms < 0.05, "k = {k}: {}", r.max_step_rms);
    }
}

#[test]
fn integral_generator_boundary_multiplicity() {
    let hp = std::f64::consts::FRAC_PI_2;
    let e = ensemble(hp, 100, 1000, 5);
    let s = solve_example2(&TerminalSpec::CosKernel, &e, 1.0, Some(3.0), 3).unwrap();
    assert_eq!(s.classification.verdict, Verdict::Multiple);
    assert!(s.solution.is_finite());
    let r = residual_check(&s.solution, &s.generator, &s.terminal, &e).unwrap();
    assert!(r.max_step_rms < 0.01, "{}", r.max_step_rms);
    let e2 = ensemble(hp, 100, 1000, 5);
    let nope = solve_example2(&TerminalSpec::Brownian { scale: 1.0, shift: 0.0 }, &e2, 1.0, Some(1.0), 3);
    assert!(matches!(nope, Err(Error::NoSolution(_))));
}

#[test]
fn linear_z_solutions_satisfy_discrete_dynamics() {
    let grid = TimeGrid::new(1.0, 40).unwrap();
    let xi = TerminalSpec::Brownian { scale: 1.0, shift: 0.0 };
    let s = solve_linear_z(
        &xi,
        &grid,
        4000,
        9,
        &GFunction::Constant(0.7),
        &DelayMeasure::uniform(1.0).unwrap(),
        2,
    )
    .unwrap();
    // all steps but the last are algebraic identities; the last one carries
    // the regression error of the representation
    let check = |r: &ResidualReport<f64>| {
        let interior = r.step_rms[..39].iter().copied().fold(0.0, f64::max);
        assert!(interior < 1e-12, "{interior}");
        assert!(r.step_rms[39] < regression_tolerance(4000), "{}", r.step_rms[39]);
        assert_eq!(r.terminal_mismatch, 0.0);
    };
    let r = residual_check(&s.solution, &s.generator, &s.terminal, &s.ensemble).unwrap();
    check(&r);

    for delay in [0.0, 0.25, 0.5, 1.0] {
        let d = solve_dirac_z(&xi, &grid, 4000, 9, 0.8, delay, 2).unwrap();
        let r = residual_check(&d.solution, &d.generator, &d.terminal, &d.ensemble).unwrap();
        check(&r);
    }
}

#[test]
fn example6_solution_has_second_order_residual() {
    let e = ensemble(1.0, 64, 1000, 2);
    let s = example6_solution(&e).unwrap();
    let r = residual_check(&s.solution, &s.generator, &s.terminal, &e).unwrap();
    assert!(r.max_abs < 1e-4, "{}", r.max_abs);
    assert_eq!(r.terminal_mismatch, 0.0);
    assert!((s.solution.y_at(0)[0] - (1.0 - 1f64.cos())).abs() < 1e-15);
}

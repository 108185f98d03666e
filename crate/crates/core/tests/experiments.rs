use tdbsde::closed_form::example6_solution;
use tdbsde::experiments::*;
use tdbsde::*;

#[test]
fn measure_collapse_median_decays_and_mean_holds() {
    let r = measure_collapse_experiment(50, 20_000, 11).unwrap();
    assert!(r.find_check("roots").unwrap().passed);
    assert!(r.find_check("median_collapse").unwrap().passed, "{:?}", r.checks);
    assert!(r.values["median_log_density"] < -20.0);
    let zero = measure_collapse_experiment(0, 100, 1).unwrap();
    assert_eq!(zero.values["median_density"], 1.0);
}

#[test]
fn comparison_failure_visible_on_longer_horizon() {
    let r = comparison_failure_experiment(2.0, 40, 20_000, 4, 1.0).unwrap();
    assert_eq!(r.verdict, ExperimentVerdict::Pass, "{:?}", r.checks);
    let p = r.proportions["p_negative"];
    let q = r.values["p_negative_quadrature"];
    // trapezoid integral on the grid against the exact conditional law
    assert!((p.estimate - q).abs() < 0.01, "{} vs {q}", p.estimate);
    assert!(comparison_failure_experiment(1.0, 40, 10, 4, 1.0).is_err());
}

#[test]
fn bmo_of_brownian_terminal_is_horizon() {
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let e = simulate_paths(&grid, 20_000, 2, None).unwrap();
    let xi: Vec<f64> = e.brownian_at(20).to_vec();
    let out = picard_solve(&Generator::zero(1.0), &xi, &e, &SolverConfig::default()).unwrap();
    let r = bmo_diagnostic(&out.solution, &e, &RegressionBasis::polynomial(2).unwrap()).unwrap();
    let s = r.values["statistic"];
    assert!((s - 1.0).abs() < 0.1, "{s}");

    let zero = GridSolution::zeros(grid, 20_000);
    let r0 = bmo_diagnostic(&zero, &e, &RegressionBasis::polynomial(2).unwrap()).unwrap();
    assert_eq!(r0.values["statistic"], 0.0);
}

#[test]
fn stopped_measure_identity_for_cosine_control() {
    let hp = std::f64::consts::FRAC_PI_2;
    let grid = TimeGrid::new(hp, 100).unwrap();
    let e = simulate_paths(&grid, 20_000, 8, None).unwrap();
    let s = example6_solution(&e).unwrap();
    let basis = TerminalSpec::CosIntegral.basis(2, &e).unwrap();
    let r = stopped_measure_solution(&s.solution, &s.generator, &e, 5.0, &basis).unwrap();
    assert_eq!(r.verdict, ExperimentVerdict::Pass, "{:?}", r.checks);
    let tau = r.estimates["tau"].value;
    assert!((tau - (0.2f64).acos()).abs() < grid.dt(), "{tau}");

    let r1 = stopped_measure_solution(&s.solution, &s.generator, &e, 1.0, &basis).unwrap();
    assert_eq!(r1.verdict, ExperimentVerdict::Inconclusive);
}

#[test]
fn stopped_comparison_orders_solutions() {
    let grid = TimeGrid::new(0.25, 25).unwrap();
    let e = simulate_paths(&grid, 10_000, 5, None).unwrap();
    let xi: Vec<f64> = e.brownian_at(25).to_vec();
    let b = Generator::linear_delayed_z(GFunction::Constant(0.5), DelayMeasure::uniform(0.25).unwrap()).unwrap();
    let a = b.with_offset(0.1).unwrap();
    let cfg = SolverConfig::default();
    let r = stopped_comparison(&a, &b, &xi, &e, 100.0, &cfg).unwrap();
    assert_eq!(r.verdict, ExperimentVerdict::Pass, "{:?}", r.checks);
    let same = stopped_comparison(&b, &b, &xi, &e, 100.0, &cfg).unwrap();
    assert_eq!(same.values["max_violation_mass"], 0.0);
}

#[test]
fn unboundedness_reports_bounds() {
    let r = unboundedness_experiment(100, 5_000, 3, 5.0, &[0.9, 0.95, 0.99]).unwrap();
    assert!(r.find_check("drift_term_monotone").unwrap().passed);
    for u in [0.9, 0.95, 0.99] {
        assert!(r.values[&format!("log10_probability_bound_u{u}")] < -5.0);
    }
    assert!(unboundedness_experiment(100, 10, 3, 5.0, &[1.0]).is_err());
    // with a low threshold the deterministic part alone is enough early on
    let low = unboundedness_experiment(100, 2_000, 3, 0.0, &[0.01]).unwrap();
    assert!(low.proportions["p_exceed_u0.01"].estimate > 0.4);
}

#[test]
fn experiments_do_not_depend_on_thread_count() {
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let a = comparison_failure_experiment(2.0, 20, 5_000, 4, 1.0).unwrap();
            let b = measure_collapse_experiment(10, 3_000, 4).unwrap();
            (format!("{a:?}"), format!("{b:?}"))
        })
    };
    assert_eq!(run(1), run(4));
}

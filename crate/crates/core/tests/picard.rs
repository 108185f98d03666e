use tdbsde::*;

fn setup(n: usize, paths: usize, seed: u64) -> PathEnsemble64 {
    simulate_paths(&TimeGrid::new(1.0, n).unwrap(), paths, seed, None).unwrap()
}

#[test]
fn fixed_delay_contracts_geometrically() {
    let e = setup(20, 20_000, 1);
    let xi: Vec<f64> = e.brownian_at(20).iter().map(|w| w + 1.0).collect();
    let gen = Generator::fixed_delay_y(0.5, 1.0).unwrap();
    let out = picard_solve(&gen, &xi, &e, &SolverConfig::default()).unwrap();
    assert_eq!(out.report.verdict, ConvergenceVerdict::Converged);
    let y0 = out.solution.mean_y(0);
    assert!((y0 - 2.0).abs() < 0.04, "{y0}");
    let tr = out.report.y0_trace();
    for w in tr.windows(3).take(10) {
        let r = (w[2] - w[1]) / (w[1] - w[0]);
        assert!((r - 0.5).abs() < 1e-3, "{r}");
    }
    assert_eq!(out.solution.y_at(20), &xi[..]);
    let r = residual_check(&out.solution, &gen, &xi, &e).unwrap();
    assert!(r.passes(regression_tolerance(20_000)), "{:?}", r.max_step_rms);
}

#[test]
fn fixed_delay_at_critical_product_diverges_linearly() {
    let e = setup(10, 2_000, 2);
    let xi = vec![1.0; 2_000];
    let gen = Generator::fixed_delay_y(1.0, 1.0).unwrap();
    let out = picard_solve(&gen, &xi, &e, &SolverConfig::default()).unwrap();
    assert_eq!(out.report.verdict, ConvergenceVerdict::Diverged);
    let tr = out.report.y0_trace();
    for w in tr.windows(2) {
        assert!((w[1] - w[0] - 1.0).abs() < 1e-6);
    }
}

#[test]
fn zero_generator_converges_at_once() {
    let e = setup(10, 5_000, 3);
    let xi: Vec<f64> = e.brownian_at(10).iter().map(|w| w.sin()).collect();
    let out = picard_solve(&Generator::zero(1.0), &xi, &e, &SolverConfig::default()).unwrap();
    assert_eq!(out.report.verdict, ConvergenceVerdict::Converged);
    assert!(out.report.iterations <= 2);
}

#[test]
fn different_starts_reach_the_same_fixed_point() {
    let e = setup(20, 5_000, 4);
    let xi: Vec<f64> = e.brownian_at(20).to_vec();
    let measure = DelayMeasure::uniform(1.0).unwrap();
    let gen = Generator::linear_delayed_z(GFunction::Constant(0.2), measure.clone()).unwrap();
    let cfg = SolverConfig::default();
    let (_, delta) = optimize_beta(1.0, gen.lipschitz_constant(), &measure).unwrap();
    assert!(delta < 1.0);
    let basis = RegressionBasis::polynomial(cfg.degree).unwrap();
    let a = picard_solve(&gen, &xi, &e, &cfg).unwrap();
    let mut init = GridSolution::zeros(*e.grid(), 5_000);
    for i in 0..=20 {
        init.y_at_mut(i).iter_mut().for_each(|v| *v = 1.0);
    }
    let b = picard_solve_from(&gen, &xi, &e, &cfg, &basis, init).unwrap();
    assert_eq!(a.report.verdict, ConvergenceVerdict::Converged);
    assert_eq!(b.report.verdict, ConvergenceVerdict::Converged);
    let d = a.solution.difference(&b.solution).unwrap();
    let worst = d.y().iter().chain(d.z()).fold(0.0f64, |m, v| m.max(v * v));
    assert!(worst < 3.0 * cfg.tolerance, "{worst}");
    for r in &a.report.ratios[1..] {
        assert!(*r <= delta + 0.1, "{r} vs {delta}");
    }
}

#[test]
fn picard_is_deterministic_across_pools() {
    let e = setup(10, 3_000, 5);
    let xi: Vec<f64> = e.brownian_at(10).iter().map(|w| w * w).collect();
    let gen = Generator::uniform_integral_y(0.5, 1.0).unwrap();
    let run = |t: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap().install(|| {
            picard_solve(&gen, &xi, &e, &SolverConfig::default()).unwrap()
        })
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.solution.y(), b.solution.y());
    assert_eq!(a.report, b.report);
}

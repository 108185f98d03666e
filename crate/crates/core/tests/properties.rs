use proptest::prelude::*;
use tdbsde::*;

fn measure_strategy(horizon: f64) -> impl Strategy<Value = DelayMeasure64> {
    (
        prop::collection::vec((0.0..=1.0f64, 0.1..1.0f64), 0..4),
        0.0..1.0f64,
    )
        .prop_map(move |(atoms, c)| {
            let mass: f64 = atoms.iter().map(|a| a.1).sum();
            let (atoms, c) = if atoms.is_empty() {
                (vec![], 1.0)
            } else {
                let total = mass + c;
                let mut scaled: Vec<(f64, f64)> =
                    atoms.iter().map(|&(r, w)| (-r * horizon, w / total)).collect();
                let used: f64 = scaled.iter().map(|a| a.1).sum();
                let rest = 1.0 - used;
                if rest <= 0.0 {
                    let last = scaled.len() - 1;
                    scaled[last].1 += rest;
                    (scaled, 0.0)
                } else {
                    (scaled, rest)
                }
            };
            DelayMeasure::new(horizon, atoms, c).unwrap()
        })
}

fn generators(measure: &DelayMeasure64, k: f64, horizon: f64) -> Vec<Generator64> {
    vec![
        Generator::zero(horizon),
        Generator::fixed_delay_y(k, horizon).unwrap(),
        Generator::delayed_y(k, measure.clone()).unwrap(),
        Generator::uniform_integral_y(k, horizon).unwrap(),
        Generator::linear_delayed_z(GFunction::Constant(k), measure.clone()).unwrap(),
        Generator::linear_delayed_z(
            GFunction::Table((0..=12).map(|i| k * (i as f64 * 0.7).sin()).collect()),
            measure.clone(),
        )
        .unwrap(),
        Generator::affine_linear_delayed_z(GFunction::Constant(k), measure.clone(), 0.3).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lipschitz_holds_for_random_segments(
        measure in measure_strategy(1.5),
        k in -3.0..3.0f64,
        step in 0usize..12,
        y1 in prop::collection::vec(-5.0..5.0f64, 13),
        y2 in prop::collection::vec(-5.0..5.0f64, 13),
        z1 in prop::collection::vec(-5.0..5.0f64, 13),
        z2 in prop::collection::vec(-5.0..5.0f64, 13),
    ) {
        let grid = TimeGrid::new(1.5, 12).unwrap();
        let a = PastSegment::new(step, &y1, &z1).unwrap();
        let b = PastSegment::new(step, &y2, &z2).unwrap();
        let same = PastSegment::new(step, &y1, &z1).unwrap();
        for gen in generators(&measure, k, 1.5) {
            let w = gen.grid_weights(&grid).unwrap();
            prop_assert!(gen.lipschitz_check(&a, &b, &w).unwrap());
            prop_assert!(gen.lipschitz_check(&a, &same, &w).unwrap());
        }
    }

    #[test]
    fn discretization_is_normalized(measure in measure_strategy(2.0), n in 1usize..200) {
        let grid = TimeGrid::new(2.0, n).unwrap();
        let w = measure.discretize(&grid).unwrap();
        prop_assert_eq!(w.weights().len(), n + 1);
        prop_assert!(w.weights().iter().all(|&x| x >= 0.0));
        prop_assert!((w.total() - 1.0).abs() <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn uniform_tail_mass_is_monotone_and_close_to_grid(s1 in 0.0..=1.0f64, s2 in 0.0..=1.0f64, n in 1usize..100) {
        let a = DelayMeasure::uniform(1.0).unwrap();
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        prop_assert!(a.tail_mass(lo, 0.0).unwrap() >= a.tail_mass(hi, 0.0).unwrap());
        let grid = TimeGrid::new(1.0, n).unwrap();
        let w = a.discretize(&grid).unwrap();
        for m in 0..n {
            let exact = a.tail_mass(grid.time(m), 0.0).unwrap();
            prop_assert!((w.tail(m) - exact).abs() <= 1.0 / n as f64 + 1e-12);
        }
    }

    #[test]
    fn optimized_beta_beats_fixed_choice(measure in measure_strategy(1.0), t in 0.1..3.0f64, k in 0.0..5.0f64) {
        let m = DelayMeasure::new(t, measure.atoms().iter().map(|&(u, w)| (u * t, w)).collect(), measure.uniform_weight()).unwrap();
        let (beta, best) = optimize_beta(t, k, &m).unwrap();
        let fixed = contraction_bound(t, k, 1.0 / t, &m).unwrap();
        prop_assert!(beta > 0.0);
        prop_assert!(best <= fixed * (1.0 + 1e-12));
        // linear in K
        let twice = contraction_bound(t, 2.0 * k, beta, &m).unwrap();
        prop_assert!((twice - 2.0 * best).abs() <= 1e-12 * (1.0 + twice));
    }

    #[test]
    fn weighted_norms_scale_with_beta(c in 0.1..3.0f64, beta in 0.0..3.0f64) {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let mut d = GridSolution::zeros(grid, 4);
        for i in 0..=10 {
            d.y_at_mut(i).iter_mut().for_each(|v| *v = c);
        }
        let (s, h) = weighted_norms(&d, beta);
        prop_assert!((s - c * c * beta.exp()).abs() <= 1e-12 * s);
        prop_assert_eq!(h, 0.0);
    }
}

#[test]
fn contraction_bound_dirac_at_horizon() {
    for (t, k) in [(1.0, 1.0), (0.5, 0.3), (2.0, 0.1)] {
        let a = DelayMeasure::dirac(t, t).unwrap();
        let d = contraction_bound(t, k, 1.0 / t, &a).unwrap();
        let expected = 9.0 * t * k * std::f64::consts::E * f64::max(1.0, t);
        assert!((d - expected).abs() <= 1e-12 * expected.max(1.0), "{d} vs {expected}");
    }
    assert_eq!(contraction_bound(1.0, 0.0, 3.0, &DelayMeasure::uniform(1.0).unwrap()).unwrap(), 0.0);
    assert!(contraction_bound(1.0, 1.0, 0.0, &DelayMeasure::uniform(1.0).unwrap()).is_err());
}

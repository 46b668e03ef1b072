use bearing_opt::controller::{control, total_cost, ControllerConfig};
use bearing_opt::formation::{is_congruent, is_similar, Configuration, FormationSpec};
use bearing_opt::reshaping::{ReshapingParams, Spline, SplineGrid, DEFAULT_MARGIN};
use bearing_opt::scenario::{gen_scenario, Case, ScenarioOptions};
use proptest::prelude::*;

fn pentagon(case: Case) -> FormationSpec {
    let s = gen_scenario(&ScenarioOptions { n_train: 1, n_test: 1, ..Default::default() }).unwrap();
    s.spec_for(case).unwrap()
}

fn ctrl(case: Case) -> ControllerConfig {
    let params = ReshapingParams::initial(7, Some((7, 10.0))).unwrap();
    let params = if case == Case::NoEd { params.bearing_only() } else { params };
    ControllerConfig::new(pentagon(case), params).unwrap()
}

fn coords(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, n)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn control_sums_to_zero_and_ignores_translation(x in coords(10), shift in coords(2)) {
        for case in [Case::NoEd, Case::FullEd] {
            let c = ctrl(case);
            let cfg = Configuration::new(2, x.clone()).unwrap();
            let u = control(&cfg, &c).unwrap();
            let (sx, sy) = u.chunks(2).fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
            prop_assert!(sx.abs() < 1e-9 && sy.abs() < 1e-9);
            let moved = cfg.transformed(1.0, &shift);
            prop_assert!(close(&u, &control(&moved, &c).unwrap(), 1e-9));
        }
    }

    #[test]
    fn bearing_only_control_is_scale_free(x in coords(10), scale in 0.1..10.0f64) {
        let c = ctrl(Case::NoEd);
        let cfg = Configuration::new(2, x).unwrap();
        let u = control(&cfg, &c).unwrap();
        let v = control(&cfg.transformed(scale, &[0.0, 0.0]), &c).unwrap();
        prop_assert!(close(&u, &v, 1e-9));
    }

    #[test]
    fn cost_is_nonnegative(x in coords(10)) {
        for case in [Case::NoEd, Case::FullEd] {
            let cfg = Configuration::new(2, x.clone()).unwrap();
            prop_assert!(total_cost(&cfg, &ctrl(case)).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn cost_vanishes_on_similar_formations(scale in 0.2..5.0f64, shift in coords(2)) {
        let desired = pentagon(Case::NoEd).desired().clone();
        let noed = total_cost(&desired.transformed(scale, &shift), &ctrl(Case::NoEd)).unwrap();
        prop_assert!(noed.abs() < 1e-12);
        let fulled = total_cost(&desired.transformed(1.0, &shift), &ctrl(Case::FullEd)).unwrap();
        prop_assert!(fulled.abs() < 1e-12);
        if (scale - 1.0).abs() > 0.05 {
            prop_assert!(total_cost(&desired.transformed(scale, &shift), &ctrl(Case::FullEd)).unwrap() > 0.0);
        }
    }

    #[test]
    fn similarity_test_recovers_transforms(x in coords(10), scale in 0.1..10.0f64, shift in coords(2)) {
        let a = Configuration::new(2, x).unwrap();
        prop_assume!(a.diameter() > 0.5);
        let b = a.transformed(scale, &shift);
        let fit = is_similar(&b, &a, 1e-9 * a.diameter() * scale.max(1.0)).unwrap();
        prop_assert!(fit.holds);
        prop_assert!((fit.scale - scale).abs() < 1e-9 * scale);
        let cong = is_congruent(&b, &a, 1e-6).unwrap();
        prop_assert_eq!(cong.holds, (scale - 1.0).abs() * a.rms_radius() < 1e-7);
    }

    #[test]
    fn feasible_bearing_functions_decrease(slopes in prop::collection::vec(0.01..3.0f64, 7), top in 0.0..3.0f64) {
        // sorted so that f' is non-increasing toward c = -1, first entry at c = 1
        let mut s = slopes.clone();
        s[0] = top;
        let grid = SplineGrid::bearing(7).unwrap();
        let h = grid.step();
        let mut alpha = vec![0.0, -s[0]];
        for m in 0..6 {
            alpha.push((s[m + 1] - s[m]) / (2.0 * h));
        }
        let f = Spline::new(grid, alpha.clone()).unwrap();
        let params = ReshapingParams::new(f.clone(), None).unwrap();
        let feasible = params.constraints(DEFAULT_MARGIN).unwrap().is_feasible(&alpha, 1e-12);
        prop_assert_eq!(feasible, s[1..].iter().all(|v| *v >= DEFAULT_MARGIN));
        let mut prev = f.value(-1.0);
        for k in 1..=2000 {
            let c = -1.0 + 2.0 * k as f64 / 2000.0;
            let v = f.value(c);
            prop_assert!(v <= prev + 1e-14);
            prev = v;
        }
        prop_assert!(f.value(1.0).abs() < 1e-14);
    }

    #[test]
    fn splines_are_continuously_differentiable(alpha in prop::collection::vec(-3.0..3.0f64, 8)) {
        let f = Spline::new(SplineGrid::symmetric(7, 4.0).unwrap(), alpha).unwrap();
        for &z in &f.grid().knots()[1..6] {
            let h = 1e-10;
            prop_assert!((f.derivative(z - h) - f.derivative(z + h)).abs() <= 1e-8);
            prop_assert!((f.value(z - h) - f.value(z + h)).abs() <= 1e-8);
        }
    }
}

#[test]
fn scenarios_are_reproducible_and_respect_the_guard() {
    let opts = ScenarioOptions { n_train: 5, n_test: 20, seed: 42, ..Default::default() };
    let a = gen_scenario(&opts).unwrap();
    assert_eq!(a, gen_scenario(&opts).unwrap());
    let b = gen_scenario(&ScenarioOptions { seed: 43, ..opts.clone() }).unwrap();
    assert_ne!(a.ic_test, b.ic_test);
    let eps = a.guard_eps();
    for x in a.ic_train.iter().chain(&a.ic_test) {
        for e in a.spec.edges() {
            let (p, q) = (x.agent(e.i), x.agent(e.j));
            assert!(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() >= eps);
        }
        assert!(x.as_slice().iter().all(|v| (-5.0..=5.0).contains(v)));
    }
    assert!(a.ic_train.iter().all(|x| !a.ic_test.contains(x)));
}

#[test]
fn desired_pentagon_is_regular() {
    let d = pentagon(Case::NoEd).desired().clone();
    for (k, p) in d.points().iter().enumerate() {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / 5.0;
        assert!((p[0] - angle.cos()).abs() < 1e-12 && (p[1] - angle.sin()).abs() < 1e-12);
    }
}

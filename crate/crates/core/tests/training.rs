use bearing_opt::experiment::{
    controller, fit_init, regenerate_report, run_case, run_experiment, train, CasePlan, CaseResult, ExperimentConfig,
};
use bearing_opt::metrics::EvalReport;
use bearing_opt::optimizer::{objective, optimize, TrainingProblem};
use bearing_opt::par::Execution;
use bearing_opt::reshaping::ReshapingParams;
use bearing_opt::scenario::{gen_scenario, Case, Scenario, ScenarioOptions};
use bearing_opt::simulator::{simulate, Integrator};
use bearing_opt::sqp::SolverOptions;

fn triangle(seed: u64) -> Scenario {
    gen_scenario(&ScenarioOptions { n_agents: 3, n_train: 2, n_test: 4, seed, ..Default::default() }).unwrap()
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        horizon: 20.0,
        solver: SolverOptions { max_iterations: 12, ..Default::default() },
        ..Default::default()
    }
}

/// Gradient gate: analytic objective gradient against central differences on event-free runs.
#[test]
fn objective_gradient_matches_finite_differences() {
    for case in [Case::NoEd, Case::FullEd] {
        let s = triangle(21);
        let cfg = ExperimentConfig { horizon: 6.0, ..Default::default() };
        let ctrl = controller(&s, case, fit_init(case, &cfg).unwrap(), &cfg).unwrap();
        let mut sim = cfg.sim_config(&s);
        sim.integrator = Integrator::Dopri5 { atol: 1e-13, rtol: 1e-12 };
        sim.early_exit = None;
        let problem = TrainingProblem::new(ctrl.clone(), s.ic_train.clone(), sim.clone()).unwrap();
        for x0 in &s.ic_train {
            assert!(simulate(&ctrl, x0, &sim, false).unwrap().events.is_empty());
        }
        let alpha = problem.alpha0();
        let e = problem.evaluate(&alpha, true).unwrap();
        let g = e.gradient.unwrap();
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        for p in 0..alpha.len() {
            let h = 1e-6;
            let (mut a, mut b) = (alpha.clone(), alpha.clone());
            a[p] += h;
            b[p] -= h;
            let fd = (objective(&a, &problem).unwrap() - objective(&b, &problem).unwrap()) / (2.0 * h);
            assert!((fd - g[p]).abs() <= 1e-5 * gnorm, "{case:?} component {p}: analytic {} vs fd {fd}", g[p]);
        }
    }
}

#[test]
fn optimizer_keeps_iterates_feasible_and_monotone() {
    let s = triangle(22);
    let cfg = small_config();
    let res = train(&s, Case::NoEd, 2, &cfg).unwrap();
    assert!(res.feasibility_residuals.iter().all(|v| *v <= 1e-8), "{:?}", res.feasibility_residuals);
    for w in res.objective_history.windows(2) {
        assert!(w[1] <= w[0], "objective increased: {w:?}");
    }
    assert!(res.objective_opt < res.objective_init);
    assert_eq!(res.objective_history.first(), Some(&res.objective_init));

    let f = ReshapingParams::from_doc(res.params_opt).unwrap();
    assert!(f.eval_f(bearing_opt::reshaping::FunctionKind::Bearing, 1.0).unwrap().abs() < 1e-8);
    let mut prev = f64::INFINITY;
    for k in 0..=4000 {
        let c = -1.0 + 2.0 * k as f64 / 4000.0;
        let v = f.eval_f(bearing_opt::reshaping::FunctionKind::Bearing, c).unwrap();
        assert!(v <= prev + 1e-12, "f_b increases at c = {c}");
        prev = v;
    }
}

#[test]
fn dropping_constraints_does_not_raise_the_optimum() {
    let s = triangle(23);
    let cfg = small_config();
    let constrained = train(&s, Case::NoEd, 2, &cfg).unwrap();
    let mut free = cfg.clone();
    free.solver.unconstrained = true;
    let relaxed = train(&s, Case::NoEd, 2, &free).unwrap();
    assert!(relaxed.objective_opt <= constrained.objective_opt + 1e-9 * constrained.objective_opt.abs());
}

#[test]
fn fixed_step_training_is_reproducible_across_execution_modes() {
    let s = triangle(24);
    let mut cfg = small_config();
    cfg.fixed_step = Some(0.02);
    cfg.solver.max_iterations = 4;
    let a = train(&s, Case::FullEd, 2, &cfg).unwrap();
    let b = train(&s, Case::FullEd, 2, &cfg).unwrap();
    assert_eq!(a.alpha_opt, b.alpha_opt);
    cfg.execution = Execution::Sequential;
    let c = train(&s, Case::FullEd, 2, &cfg).unwrap();
    assert_eq!(a.alpha_opt, c.alpha_opt);
    assert_eq!(a.objective_history, c.objective_history);
}

#[test]
fn starting_point_matches_the_initial_fit() {
    let s = triangle(25);
    let cfg = small_config();
    let ctrl = controller(&s, Case::FullEd, fit_init(Case::FullEd, &cfg).unwrap(), &cfg).unwrap();
    let problem = TrainingProblem::new(ctrl, s.ic_train.clone(), cfg.sim_config(&s)).unwrap();
    let opts = SolverOptions { max_iterations: 0, ..Default::default() };
    let res = optimize(&problem, &opts).unwrap();
    assert_eq!(res.alpha_opt, res.alpha_init);
    assert_eq!(res.objective_opt, res.objective_init);
}

#[test]
fn stored_reports_regenerate_bit_identically() {
    let s = triangle(26);
    let mut cfg = small_config();
    cfg.solver.max_iterations = 3;
    let dir = tempfile::tempdir().unwrap();
    let summary = run_case(&s, CasePlan { case: Case::NoEd, n_train: 1 }, &cfg, dir.path()).unwrap();
    for name in ["params_init.json", "params_opt.json", "solver_result.json", "objective_history.csv", "report.json", "report.csv", "report_train.json"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    assert!(dir.path().join("opt").join("traj_0.csv").exists());
    let stored = EvalReport::from_json(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(stored, summary.test);
    assert_eq!(regenerate_report(dir.path()).unwrap(), stored);
}

#[test]
fn failing_cases_do_not_stop_the_batch() {
    let s = triangle(27);
    let mut cfg = small_config();
    cfg.solver.max_iterations = 2;
    let dir = tempfile::tempdir().unwrap();
    let plans = [CasePlan { case: Case::NoEd, n_train: 9 }, CasePlan { case: Case::FullEd, n_train: 1 }];
    let out = run_experiment(&s, &plans, &cfg, dir.path()).unwrap();
    assert!(matches!(&out[0].outcome, CaseResult::Error { kind, .. } if kind == "invalid_config"));
    assert!(matches!(&out[1].outcome, CaseResult::Ok(_)));
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn margin_tightens_the_strict_inequalities() {
    let s = triangle(28);
    let mut cfg = small_config();
    cfg.solver.max_iterations = 4;
    cfg.margin = 5e-2;
    let res = train(&s, Case::FullEd, 1, &cfg).unwrap();
    let params = ReshapingParams::from_doc(res.params_opt).unwrap();
    let cons = params.constraints(5e-2).unwrap();
    assert!(cons.is_feasible(&res.alpha_opt, 1e-8), "violation {}", cons.max_violation(&res.alpha_opt));
}

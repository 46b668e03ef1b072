//! Train/test orchestration: fit the initial functions, optimize on the
//! training set, compare both parameter sets on held-out initial conditions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::error::{Error, Result};
use crate::formation::Configuration;
use crate::metrics::{EvalReport, TrialMetrics, TrialRow};
use crate::optimizer::{optimize, OptimizationResult, TrainingProblem, DEFAULT_OMEGA};
use crate::par::{self, Execution};
use crate::reshaping::{ReshapingParams, DEFAULT_MARGIN};
use crate::scenario::{Case, Scenario};
use crate::simulator::{simulate, Bump, SimConfig, TrajectoryRecord};
use crate::sqp::SolverOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub k_bearing: usize,
    pub k_range: usize,
    /// Half-width of the symmetric range grid.
    pub q_max: f64,
    pub horizon: f64,
    /// RK4 step; adaptive integration when unset.
    pub fixed_step: Option<f64>,
    pub bump: bool,
    pub leaders: Option<[usize; 2]>,
    pub omega: f64,
    /// Margin realizing the strict shape inequalities.
    pub margin: f64,
    /// Evaluate only the first `n` test configurations.
    pub n_test: Option<usize>,
    pub solver: SolverOptions,
    pub execution: Execution,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            k_bearing: 7,
            k_range: 7,
            q_max: 10.0,
            horizon: 60.0,
            fixed_step: None,
            bump: false,
            leaders: None,
            omega: DEFAULT_OMEGA,
            margin: DEFAULT_MARGIN,
            n_test: None,
            solver: SolverOptions::default(),
            execution: Execution::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn sim_config(&self, scenario: &Scenario) -> SimConfig {
        let mut sim = SimConfig::for_spec(&scenario.spec);
        sim.horizon = self.horizon;
        if let Some(dt) = self.fixed_step {
            sim = sim.fixed_step(dt);
        }
        if self.bump {
            sim.bump = Some(Bump::default());
        }
        sim
    }
}

/// Initial reshaping functions for a case; bearing-only when it has no range edges.
pub fn fit_init(case: Case, cfg: &ExperimentConfig) -> Result<ReshapingParams> {
    let params = ReshapingParams::initial(cfg.k_bearing, Some((cfg.k_range, cfg.q_max)))?;
    Ok(if case == Case::NoEd { params.bearing_only() } else { params })
}

pub fn controller(scenario: &Scenario, case: Case, params: ReshapingParams, cfg: &ExperimentConfig) -> Result<ControllerConfig> {
    let ctrl = ControllerConfig::new(scenario.spec_for(case)?, params)?;
    match cfg.leaders {
        Some(l) => ctrl.with_leaders(&l),
        None => Ok(ctrl),
    }
}

/// Optimizes the initial functions on the first `n_train` training configurations.
pub fn train(scenario: &Scenario, case: Case, n_train: usize, cfg: &ExperimentConfig) -> Result<OptimizationResult> {
    if n_train == 0 || n_train > scenario.ic_train.len() {
        return Err(Error::InvalidConfig(format!(
            "requested {n_train} training configurations, scenario has {}",
            scenario.ic_train.len()
        )));
    }
    let ctrl = controller(scenario, case, fit_init(case, cfg)?, cfg)?;
    let problem = TrainingProblem::new(ctrl, scenario.ic_train[..n_train].to_vec(), cfg.sim_config(scenario))?
        .with_margin(cfg.margin)?
        .with_omega(cfg.omega)
        .with_execution(cfg.execution);
    optimize(&problem, &cfg.solver)
}

/// Simulations of one configuration under both parameter sets.
pub type TrialPair = (TrajectoryRecord, TrajectoryRecord);

/// Runs every configuration under `init` and `opt`. Trials failing under
/// either set are reported in `failed` and excluded from the aggregates.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    scenario: &Scenario,
    case: Case,
    init: &ReshapingParams,
    opt: &ReshapingParams,
    ics: &[Configuration],
    cfg: &ExperimentConfig,
    label: &str,
) -> Result<(EvalReport, Vec<Option<TrialPair>>)> {
    let c_init = controller(scenario, case, init.clone(), cfg)?;
    let c_opt = controller(scenario, case, opt.clone(), cfg)?;
    let base = cfg.sim_config(scenario);
    let runs = par::map(cfg.execution, ics, |k, x0| {
        let mut sim = base.clone();
        sim.dense = k == 0;
        let a = simulate(&c_init, x0, &sim, false).ok()?;
        let b = simulate(&c_opt, x0, &sim, false).ok()?;
        Some((a, b))
    });
    let report = report_from_records(label, &runs, scenario.spec.desired().rms_radius());
    Ok((report, runs))
}

pub fn report_from_records(label: &str, runs: &[Option<TrialPair>], desired_scale: f64) -> EvalReport {
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for (k, run) in runs.iter().enumerate() {
        match run {
            Some((a, b)) => rows.push(TrialRow::new(k, &TrialMetrics::of(a), &TrialMetrics::of(b))),
            None => failed.push(k),
        }
    }
    EvalReport::new(label, rows, failed, desired_scale)
}

/// Stores every trial pair as `init/traj_<k>.csv` and `opt/traj_<k>.csv`.
pub fn save_trajectories(dir: &Path, runs: &[Option<TrialPair>]) -> Result<()> {
    for (k, run) in runs.iter().enumerate() {
        if let Some((a, b)) = run {
            a.save(&dir.join("init"), &format!("traj_{k}"))?;
            b.save(&dir.join("opt"), &format!("traj_{k}"))?;
        }
    }
    Ok(())
}

pub fn save_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.json")), report.to_json()?)?;
    report.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)
}

/// Recomputes `report.json` of a case directory from its stored trajectories.
pub fn regenerate_report(dir: &Path) -> Result<EvalReport> {
    let old = EvalReport::from_json(&std::fs::read_to_string(dir.join("report.json"))?)?;
    let total = old.trials.len() + old.failed.len();
    let mut runs = Vec::with_capacity(total);
    for k in 0..total {
        if old.failed.contains(&k) {
            runs.push(None);
            continue;
        }
        let stem = format!("traj_{k}.csv");
        let a = TrajectoryRecord::load(&dir.join("init").join(&stem))?;
        let b = TrajectoryRecord::load(&dir.join("opt").join(&stem))?;
        runs.push(Some((a, b)));
    }
    Ok(report_from_records(&old.label, &runs, old.desired_scale))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CasePlan {
    pub case: Case,
    pub n_train: usize,
}

impl CasePlan {
    pub fn label(&self) -> String {
        format!("{}_{}ic", self.case, self.n_train)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub label: String,
    pub case: Case,
    pub n_train: usize,
    pub objective_init: f64,
    pub objective_opt: f64,
    pub solver_status: crate::sqp::SolverStatus,
    pub train: EvalReport,
    pub test: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub label: String,
    #[serde(flatten)]
    pub outcome: CaseResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CaseResult {
    Ok(Box<CaseSummary>),
    Error { kind: String, message: String },
}

/// Trains and evaluates one case, writing its files into `dir`.
pub fn run_case(scenario: &Scenario, plan: CasePlan, cfg: &ExperimentConfig, dir: &Path) -> Result<CaseSummary> {
    std::fs::create_dir_all(dir)?;
    let init = fit_init(plan.case, cfg)?;
    std::fs::write(dir.join("params_init.json"), init.to_json()?)?;
    let res = train(scenario, plan.case, plan.n_train, cfg)?;
    res.save(dir)?;
    let opt = ReshapingParams::from_doc(res.params_opt.clone())?;
    let label = plan.label();
    let (train, _) = evaluate(scenario, plan.case, &init, &opt, &scenario.ic_train[..plan.n_train], cfg, &label)?;
    save_report(dir, "report_train", &train)?;
    let n_test = cfg.n_test.unwrap_or(scenario.ic_test.len()).min(scenario.ic_test.len());
    let (test, runs) = evaluate(scenario, plan.case, &init, &opt, &scenario.ic_test[..n_test], cfg, &label)?;
    save_report(dir, "report", &test)?;
    save_trajectories(dir, &runs)?;
    Ok(CaseSummary {
        label,
        case: plan.case,
        n_train: plan.n_train,
        objective_init: res.objective_init,
        objective_opt: res.objective_opt,
        solver_status: res.status,
        train,
        test,
    })
}

/// Runs every plan into `out_dir/<label>`; a failing case does not stop the others.
pub fn run_experiment(scenario: &Scenario, plans: &[CasePlan], cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<CaseOutcome>> {
    std::fs::create_dir_all(out_dir)?;
    let outcomes: Vec<CaseOutcome> = plans
        .iter()
        .map(|plan| {
            let label = plan.label();
            let outcome = match run_case(scenario, *plan, cfg, &out_dir.join(&label)) {
                Ok(s) => CaseResult::Ok(Box::new(s)),
                Err(e) => CaseResult::Error { kind: e.kind().into(), message: e.to_string() },
            };
            CaseOutcome { label, outcome }
        })
        .collect();
    std::fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&outcomes)?)?;
    write_summary_csv(out_dir, &outcomes)?;
    Ok(outcomes)
}

fn write_summary_csv(out_dir: &Path, outcomes: &[CaseOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_path(out_dir.join("report.csv"))?;
    w.write_record([
        "label",
        "status",
        "mean_delta_path",
        "median_delta_path",
        "mean_delta_diff",
        "median_delta_diff",
        "improvement_fraction",
        "train_mean_delta_path",
    ])?;
    for o in outcomes {
        match &o.outcome {
            CaseResult::Ok(s) => w.write_record([
                o.label.clone(),
                "ok".into(),
                s.test.delta_path.mean.to_string(),
                s.test.delta_path.median.to_string(),
                s.test.delta_diff.mean.to_string(),
                s.test.delta_diff.median.to_string(),
                s.test.improvement_fraction.to_string(),
                s.train.delta_path.mean.to_string(),
            ])?,
            CaseResult::Error { kind, .. } => {
                w.write_record([o.label.as_str(), kind.as_str(), "", "", "", "", "", ""])?
            }
        }
    }
    w.flush()?;
    Ok(())
}

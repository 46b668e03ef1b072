//! Training the reshaping parameters over a set of initial configurations.
//!
//! The objective is `L(alpha) = sum_k [ P_k(alpha) + omega * phi(x_k(T)) ]`
//! with `P_k` the total path length of the closed-loop run from the k-th
//! initial condition. Its gradient combines the path-length derivative carried
//! by the simulator with `omega * (dphi/dalpha + dphi/dx * S(T))`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::{cost_param_gradient, cost_state_gradient, ControllerConfig, EdgeBuf};
use crate::error::{Error, Result};
use crate::formation::Configuration;
use crate::par::{self, Execution};
use crate::reshaping::{ReshapingParams, ReshapingParamsDoc, ShapeConstraints, DEFAULT_MARGIN};
use crate::simulator::{simulate, SimConfig, TrajectoryRecord};
use crate::sqp::{self, IterationRecord, SolverOptions, SolverStatus};

pub const DEFAULT_OMEGA: f64 = 1000.0;

#[derive(Clone, Debug)]
pub struct TrainingProblem {
    /// Controller template; its parameters give the starting point.
    pub ctrl: ControllerConfig,
    pub ics: Vec<Configuration>,
    pub omega: f64,
    pub sim: SimConfig,
    pub constraints: ShapeConstraints,
    pub execution: Execution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcTerms {
    pub path_length: f64,
    pub terminal_cost: f64,
    pub objective: f64,
    pub guard_events: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub objective: f64,
    pub gradient: Option<Vec<f64>>,
    pub per_ic: Vec<IcTerms>,
}

impl TrainingProblem {
    pub fn new(ctrl: ControllerConfig, ics: Vec<Configuration>, sim: SimConfig) -> Result<Self> {
        if ics.is_empty() {
            return Err(Error::InvalidConfig("training needs at least one initial condition".into()));
        }
        sim.validate()?;
        let constraints = ctrl.params().constraints(DEFAULT_MARGIN)?;
        Ok(Self { ctrl, ics, omega: DEFAULT_OMEGA, sim, constraints, execution: Execution::default() })
    }

    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    /// Rebuilds the shape constraints with margin `margin` on the strict inequalities.
    pub fn with_margin(mut self, margin: f64) -> Result<Self> {
        self.constraints = self.ctrl.params().constraints(margin)?;
        Ok(self)
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn num_params(&self) -> usize {
        self.ctrl.num_params()
    }

    pub fn alpha0(&self) -> Vec<f64> {
        self.ctrl.params().alpha()
    }

    pub fn params_at(&self, alpha: &[f64]) -> Result<ReshapingParams> {
        self.ctrl.params().with_alpha(alpha)
    }

    /// Runs every initial condition; any failed run fails the evaluation.
    pub fn evaluate(&self, alpha: &[f64], gradient: bool) -> Result<Evaluation> {
        let ctrl = self.ctrl.with_alpha(alpha)?;
        let runs = par::map(self.execution, &self.ics, |_, x0| {
            let rec = simulate(&ctrl, x0, &self.sim, gradient)?;
            let g = if gradient { Some(self.ic_gradient(&ctrl, &rec)) } else { None };
            Ok::<_, Error>((ic_terms(&rec, self.omega), g))
        });
        let mut objective = 0.0;
        let mut total = gradient.then(|| vec![0.0; self.num_params()]);
        let mut per_ic = Vec::with_capacity(runs.len());
        for run in runs {
            let (terms, g) = run?;
            objective += terms.objective;
            if let (Some(t), Some(g)) = (total.as_mut(), g) {
                t.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            per_ic.push(terms);
        }
        Ok(Evaluation { objective, gradient: total, per_ic })
    }

    fn ic_gradient(&self, ctrl: &ControllerConfig, rec: &TrajectoryRecord) -> Vec<f64> {
        let np = ctrl.num_params();
        let n = rec.dim;
        let x = rec.states.last().expect("non-empty trajectory");
        let mut g = rec.path_gradient.clone().expect("sensitivity run");
        let mut dphi = vec![0.0; np];
        cost_param_gradient(x, ctrl, &mut dphi);
        let mut dx = vec![0.0; x.len()];
        cost_state_gradient(x, ctrl, &mut EdgeBuf::new(n, np), &mut dx);
        let s = rec.final_sensitivity.as_ref().expect("sensitivity run");
        for (row, gx) in dx.iter().enumerate() {
            if *gx == 0.0 {
                continue;
            }
            for p in 0..np {
                dphi[p] += gx * s[row * np + p];
            }
        }
        g.iter_mut().zip(&dphi).for_each(|(a, b)| *a += self.omega * b);
        g
    }
}

fn ic_terms(rec: &TrajectoryRecord, omega: f64) -> IcTerms {
    let path_length = rec.total_path_length();
    IcTerms {
        path_length,
        terminal_cost: rec.terminal_cost,
        objective: path_length + omega * rec.terminal_cost,
        guard_events: rec.events.len(),
    }
}

pub fn objective(alpha: &[f64], problem: &TrainingProblem) -> Result<f64> {
    Ok(problem.evaluate(alpha, false)?.objective)
}

pub fn objective_gradient(alpha: &[f64], problem: &TrainingProblem) -> Result<Vec<f64>> {
    Ok(problem.evaluate(alpha, true)?.gradient.expect("gradient requested"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub alpha_init: Vec<f64>,
    pub alpha_opt: Vec<f64>,
    pub params_opt: ReshapingParamsDoc,
    pub objective_init: f64,
    pub objective_opt: f64,
    pub objective_history: Vec<f64>,
    pub feasibility_residuals: Vec<f64>,
    pub projected_gradient_norm: f64,
    pub per_ic_init: Vec<IcTerms>,
    pub per_ic_opt: Vec<IcTerms>,
    pub status: SolverStatus,
    pub iterations: usize,
    pub evaluations: usize,
    pub history: Vec<IterationRecord>,
}

impl OptimizationResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Columns `iteration,objective,projected_gradient_norm,max_violation,step_norm,kind`.
    pub fn write_history_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "objective", "projected_gradient_norm", "max_violation", "step_norm", "kind"])?;
        for h in &self.history {
            let kind = serde_json::to_value(h.kind)?;
            out.write_record([
                h.iteration.to_string(),
                format!("{:e}", h.objective),
                format!("{:e}", h.projected_gradient_norm),
                format!("{:e}", h.max_violation),
                format!("{:e}", h.step_norm),
                kind.as_str().unwrap_or_default().to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("params_opt.json"), serde_json::to_string_pretty(&self.params_opt)?)?;
        std::fs::write(dir.join("solver_result.json"), self.to_json()?)?;
        self.write_history_csv(std::fs::File::create(dir.join("objective_history.csv"))?)
    }
}

/// Minimizes the training objective from the template parameters.
pub fn optimize(problem: &TrainingProblem, opts: &SolverOptions) -> Result<OptimizationResult> {
    let alpha0 = problem.alpha0();
    let start = problem.evaluate(&alpha0, true)?;
    let mut obj = |a: &[f64]| -> Result<(f64, Vec<f64>)> {
        let e = problem.evaluate(a, true)?;
        Ok((e.objective, e.gradient.expect("gradient requested")))
    };
    let res = sqp::minimize(&mut obj, &problem.constraints, &alpha0, opts)?;
    // the solver's evaluation mode: sensitivities take part in step-size control
    let end = problem.evaluate(&res.x, true)?;
    let pg = res.history.last().map(|h| h.projected_gradient_norm).unwrap_or(f64::NAN);
    Ok(OptimizationResult {
        params_opt: problem.params_at(&res.x)?.to_doc(),
        alpha_init: alpha0,
        objective_init: start.objective,
        objective_opt: res.objective,
        objective_history: res.history.iter().map(|h| h.objective).collect(),
        feasibility_residuals: res.history.iter().map(|h| h.max_violation).collect(),
        projected_gradient_norm: pg,
        per_ic_init: start.per_ic,
        per_ic_opt: end.per_ic,
        status: res.status,
        iterations: res.iterations,
        evaluations: res.evaluations,
        history: res.history,
        alpha_opt: res.x,
    })
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bearing_opt::experiment::{self, CasePlan, ExperimentConfig};
use bearing_opt::reshaping::ReshapingParams;
use bearing_opt::scenario::{gen_scenario, Case, Scenario, ScenarioOptions};
use bearing_opt::simulator::simulate;
use bearing_opt::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

/// Simulate, train and evaluate reshaped bearing formation controllers.
#[derive(Parser)]
#[command(name = "bearing-opt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one initial configuration and export its trajectory.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Reshaping parameters; the initial fit when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Index into the test set (or the training set with --train-set).
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        train_set: bool,
    },
    /// Write the initial reshaping functions for a case.
    FitInit {
        #[command(flatten)]
        common: Common,
    },
    /// Optimize the reshaping functions on the training set.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 7)]
        train_ics: usize,
        #[arg(long)]
        max_iter: Option<usize>,
        /// Drop the shape constraints (diagnostic).
        #[arg(long)]
        unconstrained: bool,
    },
    /// Compare initial and optimized parameters on the test set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Optimized parameters; defaults to `<out>/params_opt.json`.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        test_ics: Option<usize>,
    },
    /// Rebuild `report.json`/`report.csv` in a directory from its stored trajectories.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario JSON; generated from --seed when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value = "NoEd")]
    case: Case,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Agent count of a generated scenario.
    #[arg(long, default_value_t = 5)]
    agents: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Two agents held fixed, e.g. `0,1`.
    #[arg(long, value_parser = parse_leaders)]
    leaders: Option<[usize; 2]>,
    /// Weight the path-length integrand with the bump function.
    #[arg(long)]
    bump: bool,
    /// Fixed-step RK4 instead of adaptive integration.
    #[arg(long, num_args = 0..=1, default_missing_value = "0.01")]
    fixed_step: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Margin of the strict shape inequalities.
    #[arg(long)]
    margin: Option<f64>,
}

fn parse_leaders(s: &str) -> Result<[usize; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => {
            let a = a.parse().map_err(|_| format!("bad agent index `{a}`"))?;
            let b = b.parse().map_err(|_| format!("bad agent index `{b}`"))?;
            Ok([a, b])
        }
        _ => Err("expected two comma-separated agent indices".into()),
    }
}

impl Common {
    fn config(&self) -> ExperimentConfig {
        let mut cfg = ExperimentConfig { fixed_step: self.fixed_step, bump: self.bump, leaders: self.leaders, ..Default::default() };
        if let Some(t) = self.horizon {
            cfg.horizon = t;
        }
        if let Some(m) = self.margin {
            cfg.margin = m;
        }
        cfg
    }

    fn scenario(&self) -> Result<Scenario, Error> {
        match &self.scenario {
            Some(path) => Scenario::from_json(&std::fs::read_to_string(path)?),
            None => {
                let s = gen_scenario(&ScenarioOptions { n_agents: self.agents, seed: self.seed, ..Default::default() })?;
                std::fs::create_dir_all(&self.out)?;
                std::fs::write(self.out.join("scenario.json"), s.to_json()?)?;
                Ok(s)
            }
        }
    }
}

fn read_params(path: &Path) -> Result<ReshapingParams, Error> {
    ReshapingParams::from_json(&std::fs::read_to_string(path)?)
}

fn run(cmd: Command) -> Result<Value, Error> {
    match cmd {
        Command::Simulate { common, params, trial, train_set } => {
            let scenario = common.scenario()?;
            let cfg = common.config();
            let params = match params {
                Some(p) => read_params(&p)?,
                None => experiment::fit_init(common.case, &cfg)?,
            };
            let ics = if train_set { &scenario.ic_train } else { &scenario.ic_test };
            let x0 = ics.get(trial).ok_or_else(|| {
                Error::InvalidConfig(format!("trial {trial} out of range ({} configurations)", ics.len()))
            })?;
            let ctrl = experiment::controller(&scenario, common.case, params, &cfg)?;
            let mut sim = cfg.sim_config(&scenario);
            sim.dense = true;
            let rec = simulate(&ctrl, x0, &sim, false)?;
            let path = rec.save(&common.out, &format!("traj_{trial}"))?;
            Ok(json!({
                "trajectory": path,
                "path_length": rec.total_path_length(),
                "terminal_cost": rec.terminal_cost,
                "exit_time": rec.exit_time,
                "guard_events": rec.events.len(),
            }))
        }
        Command::FitInit { common } => {
            let params = experiment::fit_init(common.case, &common.config())?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join("params_init.json");
            std::fs::write(&path, params.to_json()?)?;
            Ok(json!({ "params": path, "num_params": params.num_params() }))
        }
        Command::Train { common, train_ics, max_iter, unconstrained } => {
            let scenario = common.scenario()?;
            let mut cfg = common.config();
            if let Some(m) = max_iter {
                cfg.solver.max_iterations = m;
            }
            cfg.solver.unconstrained = unconstrained;
            let res = experiment::train(&scenario, common.case, train_ics, &cfg)?;
            res.save(&common.out)?;
            Ok(json!({
                "params": common.out.join("params_opt.json"),
                "objective_init": res.objective_init,
                "objective_opt": res.objective_opt,
                "status": res.status,
                "iterations": res.iterations,
            }))
        }
        Command::Evaluate { common, params, test_ics } => {
            let scenario = common.scenario()?;
            let mut cfg = common.config();
            cfg.n_test = test_ics;
            let init = experiment::fit_init(common.case, &cfg)?;
            let opt = read_params(&params.unwrap_or_else(|| common.out.join("params_opt.json")))?;
            let n = cfg.n_test.unwrap_or(scenario.ic_test.len()).min(scenario.ic_test.len());
            let label = CasePlan { case: common.case, n_train: scenario.ic_train.len() }.label();
            let (report, runs) =
                experiment::evaluate(&scenario, common.case, &init, &opt, &scenario.ic_test[..n], &cfg, &label)?;
            experiment::save_report(&common.out, "report", &report)?;
            experiment::save_trajectories(&common.out, &runs)?;
            Ok(summary(&report))
        }
        Command::Report { out } => {
            let report = experiment::regenerate_report(&out)?;
            experiment::save_report(&out, "report", &report)?;
            Ok(summary(&report))
        }
    }
}

fn summary(r: &bearing_opt::metrics::EvalReport) -> Value {
    json!({
        "label": r.label,
        "trials": r.trials.len(),
        "failed": r.failed.len(),
        "delta_path": r.delta_path,
        "delta_diff": r.delta_diff,
        "improvement_fraction": r.improvement_fraction,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            println!("{}", json!({ "error": { "kind": "usage", "message": e.to_string().trim() } }));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}

//! Path-length metrics and the per-trial evaluation report.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::formation::{distance, Configuration};
use crate::simulator::TrajectoryRecord;

/// Total travelled distance of all agents.
pub fn metric_l_path(rec: &TrajectoryRecord) -> f64 {
    rec.total_path_length()
}

/// Path length in excess of the straight-line displacements.
pub fn metric_l_diff(rec: &TrajectoryRecord) -> f64 {
    let (x0, x1) = (&rec.states[0], rec.states.last().expect("non-empty record"));
    let n = rec.dim;
    let straight: f64 = (0..rec.num_agents).map(|i| distance(&x0[i * n..(i + 1) * n], &x1[i * n..(i + 1) * n])).sum();
    metric_l_path(rec) - straight
}

/// Relative improvement in percent; `None` when the baseline is not positive.
pub fn metric_delta(init: f64, opt: f64) -> Option<f64> {
    (init > 0.0 && init.is_finite() && opt.is_finite()).then(|| 100.0 * (init - opt) / init)
}

/// `(delta_path, delta_diff)`. The detour improvement is undefined when the
/// baseline detour is within integration noise of a straight path.
pub fn metric_deltas(init: &TrialMetrics, opt: &TrialMetrics) -> (Option<f64>, Option<f64>) {
    let straight = init.l_diff <= DIFF_FLOOR * init.l_path;
    (metric_delta(init.l_path, opt.l_path), if straight { None } else { metric_delta(init.l_diff, opt.l_diff) })
}

/// Relative detour below which a path counts as straight.
pub const DIFF_FLOOR: f64 = 1e-6;

/// RMS distance of the agents from their centroid.
pub fn metric_scale(config: &Configuration) -> f64 {
    config.rms_radius()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub l_path: f64,
    pub l_diff: f64,
    pub final_scale: f64,
    pub terminal_cost: f64,
    pub guard_events: usize,
}

impl TrialMetrics {
    pub fn of(rec: &TrajectoryRecord) -> Self {
        Self {
            l_path: metric_l_path(rec),
            l_diff: metric_l_diff(rec),
            final_scale: metric_scale(&rec.final_state()),
            terminal_cost: rec.terminal_cost,
            guard_events: rec.events.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub l_path_init: f64,
    pub l_path_opt: f64,
    pub l_diff_init: f64,
    pub l_diff_opt: f64,
    pub delta_path: Option<f64>,
    pub delta_diff: Option<f64>,
    pub scale_init_final: f64,
    pub scale_opt_final: f64,
    pub terminal_cost_init: f64,
    pub terminal_cost_opt: f64,
}

impl TrialRow {
    pub fn new(trial: usize, init: &TrialMetrics, opt: &TrialMetrics) -> Self {
        let (delta_path, delta_diff) = metric_deltas(init, opt);
        Self {
            trial,
            l_path_init: init.l_path,
            l_path_opt: opt.l_path,
            l_diff_init: init.l_diff,
            l_diff_opt: opt.l_diff,
            delta_path,
            delta_diff,
            scale_init_final: init.final_scale,
            scale_opt_final: opt.final_scale,
            terminal_cost_init: init.terminal_cost,
            terminal_cost_opt: opt.terminal_cost,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
    /// Trials for which the metric is undefined.
    pub undefined: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut defined = Vec::new();
        let mut undefined = 0;
        for v in values {
            match v {
                Some(x) => defined.push(x),
                None => undefined += 1,
            }
        }
        defined.sort_by(f64::total_cmp);
        let count = defined.len();
        let mean = if count == 0 { f64::NAN } else { defined.iter().sum::<f64>() / count as f64 };
        let median = match count {
            0 => f64::NAN,
            c if c % 2 == 1 => defined[c / 2],
            c => 0.5 * (defined[c / 2 - 1] + defined[c / 2]),
        };
        Self { mean, median, count, undefined }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub trials: Vec<TrialRow>,
    /// Trials whose simulation failed under either parameter set.
    pub failed: Vec<usize>,
    pub delta_path: Summary,
    pub delta_diff: Summary,
    pub l_path_init: Summary,
    pub l_path_opt: Summary,
    /// Share of trials with a shorter optimized path.
    pub improvement_fraction: f64,
    pub desired_scale: f64,
}

impl EvalReport {
    pub fn new(label: impl Into<String>, trials: Vec<TrialRow>, failed: Vec<usize>, desired_scale: f64) -> Self {
        let improved = trials.iter().filter(|r| r.l_path_opt < r.l_path_init).count();
        let improvement_fraction = if trials.is_empty() { f64::NAN } else { improved as f64 / trials.len() as f64 };
        Self {
            label: label.into(),
            delta_path: Summary::of(trials.iter().map(|r| r.delta_path)),
            delta_diff: Summary::of(trials.iter().map(|r| r.delta_diff)),
            l_path_init: Summary::of(trials.iter().map(|r| Some(r.l_path_init))),
            l_path_opt: Summary::of(trials.iter().map(|r| Some(r.l_path_opt))),
            improvement_fraction,
            trials,
            failed,
            desired_scale,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per trial; undefined deltas are left empty.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.trials {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }
}

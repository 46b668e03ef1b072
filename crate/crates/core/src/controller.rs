//! Formation cost, per-edge gradients and their derivatives.
//!
//! The cost sums over undirected edges,
//!
//! ```text
//!     phi(x) = w_b * sum d_ij f_b(c_ij) + w_d * sum f_d(q_ij)
//! ```
//!
//! with `c_ij` the bearing similarity and `q_ij = d_ij c_ij - d_g,ij`, and
//! the control is `u = -dphi/dx`. Because `d_ij c_ij = beta_g,ij^T (x_j - x_i)`,
//! the range similarity is linear in the positions.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::formation::{distance, Configuration, FormationSpec};
use crate::reshaping::ReshapingParams;

/// Separation below which an edge is treated as coincident and its bearing
/// term contributes the zero subgradient.
pub const COINCIDENT_EPS: f64 = 1e-9;

/// Everything a gradient-flow controller needs besides the state.
#[derive(Clone, Debug)]
pub struct ControllerConfig {
    spec: Arc<FormationSpec>,
    params: ReshapingParams,
    bearing_weight: f64,
    range_weight: f64,
    leaders: Vec<usize>,
}

impl ControllerConfig {
    pub fn new(spec: impl Into<Arc<FormationSpec>>, params: ReshapingParams) -> Result<Self> {
        let spec = spec.into();
        if spec.has_range_edges() && params.range.is_none() {
            return Err(Error::InvalidConfig(
                "formation has range edges but no range reshaping function was given".into(),
            ));
        }
        Ok(Self { spec, params, bearing_weight: 1.0, range_weight: 1.0, leaders: Vec::new() })
    }

    pub fn with_weights(mut self, bearing: f64, range: f64) -> Result<Self> {
        if !(bearing > 0.0) || !(range >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "cost weights must satisfy w_b > 0, w_d >= 0 (got {bearing}, {range})"
            )));
        }
        self.bearing_weight = bearing;
        self.range_weight = range;
        Ok(self)
    }

    /// Agents whose velocity is held at zero.
    pub fn with_leaders(mut self, leaders: &[usize]) -> Result<Self> {
        if let Some(bad) = leaders.iter().find(|&&l| l >= self.spec.num_agents()) {
            return Err(Error::InvalidConfig(format!("leader {bad} is not an agent")));
        }
        let mut l = leaders.to_vec();
        l.sort_unstable();
        l.dedup();
        self.leaders = l;
        Ok(self)
    }

    pub fn with_params(&self, params: ReshapingParams) -> Result<Self> {
        let mut out = self.clone();
        if out.spec.has_range_edges() && params.range.is_none() {
            return Err(Error::InvalidConfig("range reshaping function required".into()));
        }
        out.params = params;
        Ok(out)
    }

    pub fn with_alpha(&self, alpha: &[f64]) -> Result<Self> {
        self.with_params(self.params.with_alpha(alpha)?)
    }

    pub fn spec(&self) -> &FormationSpec {
        &self.spec
    }

    pub fn spec_arc(&self) -> &Arc<FormationSpec> {
        &self.spec
    }

    pub fn params(&self) -> &ReshapingParams {
        &self.params
    }

    pub fn bearing_weight(&self) -> f64 {
        self.bearing_weight
    }

    pub fn range_weight(&self) -> f64 {
        self.range_weight
    }

    pub fn leaders(&self) -> &[usize] {
        &self.leaders
    }

    pub fn is_leader(&self, i: usize) -> bool {
        self.leaders.binary_search(&i).is_ok()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    fn check_config(&self, x: &Configuration) -> Result<()> {
        if x.num_agents() != self.spec.num_agents() || x.dim() != self.spec.dim() {
            return Err(Error::InvalidConfig(format!(
                "configuration is {}x{}, formation expects {}x{}",
                x.num_agents(),
                x.dim(),
                self.spec.num_agents(),
                self.spec.dim()
            )));
        }
        Ok(())
    }
}

/// Gradient of one edge's cost with respect to the first agent of the edge.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeGradient {
    pub g: Vec<f64>,
    /// Bearing similarity `c_ij`.
    pub similarity: f64,
    /// Range `d_ij`.
    pub range: f64,
    /// Range similarity `q_ij`, for range edges.
    pub range_similarity: Option<f64>,
    /// Set when the agents coincide and the zero subgradient was returned.
    pub coincident: bool,
}

/// What the edge kernel should compute besides the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Want {
    pub jac: bool,
    pub dalpha: bool,
}

/// Scratch and output buffers for [`edge_kernel`].
#[derive(Clone, Debug)]
pub(crate) struct EdgeBuf {
    pub beta: Vec<f64>,
    pub pbg: Vec<f64>,
    /// Weighted gradient w.r.t. the first agent.
    pub g: Vec<f64>,
    /// Weighted Jacobian of `g` w.r.t. the first agent, row-major `n x n`.
    pub jac: Vec<f64>,
    /// Weighted `dg/dalpha`, row-major `n x P`.
    pub dalpha: Vec<f64>,
    pub c: f64,
    pub d: f64,
    pub q: Option<f64>,
    pub coincident: bool,
}

impl EdgeBuf {
    pub fn new(n: usize, num_params: usize) -> Self {
        Self {
            beta: vec![0.0; n],
            pbg: vec![0.0; n],
            g: vec![0.0; n],
            jac: vec![0.0; n * n],
            dalpha: vec![0.0; n * num_params],
            c: 0.0,
            d: 0.0,
            q: None,
            coincident: false,
        }
    }
}

/// Evaluates the weighted gradient of one ordered edge's cost w.r.t. `x_i`
/// and, on request, its Jacobians w.r.t. `x_i` and the parameters.
///
/// The gradient w.r.t. `x_j` is the negation, since the cost depends on
/// `x_j - x_i` only.
#[allow(clippy::too_many_arguments)]
pub(crate) fn edge_kernel(
    params: &ReshapingParams,
    wb: f64,
    wd: f64,
    xi: &[f64],
    xj: &[f64],
    goal: &[f64],
    goal_range: Option<f64>,
    want: Want,
    buf: &mut EdgeBuf,
) {
    let n = xi.len();
    let np = params.num_params();
    let nb = params.num_bearing_params();
    buf.g.iter_mut().for_each(|v| *v = 0.0);
    if want.jac {
        buf.jac.iter_mut().for_each(|v| *v = 0.0);
    }
    if want.dalpha {
        buf.dalpha.iter_mut().for_each(|v| *v = 0.0);
    }

    let d = distance(xi, xj);
    buf.d = d;
    buf.coincident = d < COINCIDENT_EPS;
    if !buf.coincident {
        for k in 0..n {
            buf.beta[k] = (xj[k] - xi[k]) / d;
        }
        let c = buf.beta.iter().zip(goal).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
        buf.c = c;
        for k in 0..n {
            buf.pbg[k] = goal[k] - c * buf.beta[k];
        }
        let (f, fp, fpp) = params.bearing.eval(c);
        for k in 0..n {
            buf.g[k] = wb * (-f * buf.beta[k] - fp * buf.pbg[k]);
        }
        if want.jac {
            // -(1/d) [ (f' c - f) P - f'' (P beta_g)(P beta_g)^T ]
            let a = -wb * (fp * c - f) / d;
            let b = wb * fpp / d;
            for r in 0..n {
                for s in 0..n {
                    let p = if r == s { 1.0 } else { 0.0 } - buf.beta[r] * buf.beta[s];
                    buf.jac[r * n + s] = a * p + b * buf.pbg[r] * buf.pbg[s];
                }
            }
        }
        if want.dalpha {
            for k in 0..n {
                let row = &mut buf.dalpha[k * np..k * np + nb];
                params.bearing.accumulate_param_rows(c, -wb * buf.beta[k], -wb * buf.pbg[k], row);
            }
        }
    } else {
        buf.c = 1.0;
    }

    buf.q = None;
    if let (Some(dg), Some(range)) = (goal_range, params.range.as_ref()) {
        let q = goal.iter().zip(xi.iter().zip(xj)).map(|(g, (a, b))| g * (b - a)).sum::<f64>() - dg;
        buf.q = Some(q);
        if wd != 0.0 {
            let (_, fp, fpp) = range.eval(q);
            for k in 0..n {
                buf.g[k] -= wd * fp * goal[k];
            }
            if want.jac {
                for r in 0..n {
                    for s in 0..n {
                        buf.jac[r * n + s] += wd * fpp * goal[r] * goal[s];
                    }
                }
            }
            if want.dalpha {
                for k in 0..n {
                    let row = &mut buf.dalpha[k * np + nb..(k + 1) * np];
                    range.accumulate_param_rows(q, 0.0, -wd * goal[k], row);
                }
            }
        }
    }
}

/// Formation cost `phi(x)`; coincident pairs contribute zero bearing cost.
pub fn total_cost(config: &Configuration, ctrl: &ControllerConfig) -> Result<f64> {
    ctrl.check_config(config)?;
    Ok(cost_unchecked(config.as_slice(), ctrl))
}

pub(crate) fn cost_unchecked(x: &[f64], ctrl: &ControllerConfig) -> f64 {
    let n = ctrl.spec.dim();
    let p = &ctrl.params;
    let mut total = 0.0;
    for e in ctrl.spec.edges() {
        let (xi, xj) = (&x[e.i * n..(e.i + 1) * n], &x[e.j * n..(e.j + 1) * n]);
        let d = distance(xi, xj);
        if d >= COINCIDENT_EPS {
            let c = (e.bearing.iter().zip(xi.iter().zip(xj)).map(|(g, (a, b))| g * (b - a)).sum::<f64>() / d)
                .clamp(-1.0, 1.0);
            total += ctrl.bearing_weight * d * p.bearing.value(c);
        }
        if let (Some(dg), Some(range)) = (e.range, p.range.as_ref()) {
            let q = e.bearing.iter().zip(xi.iter().zip(xj)).map(|(g, (a, b))| g * (b - a)).sum::<f64>() - dg;
            total += ctrl.range_weight * range.value(q);
        }
    }
    total
}

/// Partial derivative of the cost with respect to the parameters at fixed positions.
pub(crate) fn cost_param_gradient(x: &[f64], ctrl: &ControllerConfig, out: &mut [f64]) {
    let n = ctrl.spec.dim();
    let p = &ctrl.params;
    let nb = p.num_bearing_params();
    for e in ctrl.spec.edges() {
        let (xi, xj) = (&x[e.i * n..(e.i + 1) * n], &x[e.j * n..(e.j + 1) * n]);
        let d = distance(xi, xj);
        let proj = e.bearing.iter().zip(xi.iter().zip(xj)).map(|(g, (a, b))| g * (b - a)).sum::<f64>();
        if d >= COINCIDENT_EPS {
            let c = (proj / d).clamp(-1.0, 1.0);
            p.bearing.accumulate_param_rows(c, ctrl.bearing_weight * d, 0.0, &mut out[..nb]);
        }
        if let (Some(dg), Some(range)) = (e.range, p.range.as_ref()) {
            range.accumulate_param_rows(proj - dg, ctrl.range_weight, 0.0, &mut out[nb..]);
        }
    }
}

/// Gradient `dphi/dx` (no leader clamping), written into `out`.
pub(crate) fn cost_state_gradient(x: &[f64], ctrl: &ControllerConfig, buf: &mut EdgeBuf, out: &mut [f64]) {
    let n = ctrl.spec.dim();
    out.iter_mut().for_each(|v| *v = 0.0);
    let want = Want { jac: false, dalpha: false };
    for e in ctrl.spec.edges() {
        let (xi, xj) = (&x[e.i * n..(e.i + 1) * n], &x[e.j * n..(e.j + 1) * n]);
        edge_kernel(&ctrl.params, ctrl.bearing_weight, ctrl.range_weight, xi, xj, &e.bearing, e.range, want, buf);
        for k in 0..n {
            out[e.i * n + k] += buf.g[k];
            out[e.j * n + k] -= buf.g[k];
        }
    }
}

/// Stacked control `u = -dphi/dx`, with leader velocities forced to zero.
pub fn control(config: &Configuration, ctrl: &ControllerConfig) -> Result<Vec<f64>> {
    ctrl.check_config(config)?;
    let n = ctrl.spec.dim();
    let mut buf = EdgeBuf::new(n, ctrl.num_params());
    let mut u = vec![0.0; config.as_slice().len()];
    cost_state_gradient(config.as_slice(), ctrl, &mut buf, &mut u);
    u.iter_mut().for_each(|v| *v = -*v);
    for &l in ctrl.leaders() {
        u[l * n..(l + 1) * n].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(u)
}

fn ordered_goal(spec: &FormationSpec, edge: (usize, usize)) -> Result<(Vec<f64>, Option<f64>)> {
    let (i, j) = edge;
    let goal = spec
        .desired_bearing(i, j)
        .ok_or_else(|| Error::InvalidConfig(format!("({i}, {j}) is not a bearing edge")))?;
    Ok((goal, spec.desired_range(i, j)))
}

fn single_edge(
    spec: &FormationSpec,
    params: &ReshapingParams,
    config: &Configuration,
    edge: (usize, usize),
    bearing: bool,
    want: Want,
) -> Result<EdgeBuf> {
    let (goal, goal_range) = ordered_goal(spec, edge)?;
    let n = spec.dim();
    let (wb, wd, gr) = if bearing {
        (1.0, 0.0, None)
    } else {
        let dg = goal_range.ok_or_else(|| Error::InvalidConfig(format!("({}, {}) is not a range edge", edge.0, edge.1)))?;
        if params.range.is_none() {
            return Err(Error::InvalidConfig("no range reshaping function configured".into()));
        }
        (0.0, 1.0, Some(dg))
    };
    // bearing weight 0 still evaluates the bearing branch, which then contributes nothing
    let mut buf = EdgeBuf::new(n, params.num_params());
    edge_kernel(params, wb, wd, config.agent(edge.0), config.agent(edge.1), &goal, gr, want, &mut buf);
    if !bearing {
        buf.q = buf.q.or(Some(0.0));
    }
    Ok(buf)
}

/// Gradient of `d_ij f_b(c_ij)` with respect to `x_i`. Coincident agents
/// yield the zero subgradient.
pub fn edge_gradient_bearing(
    spec: &FormationSpec,
    params: &ReshapingParams,
    config: &Configuration,
    edge: (usize, usize),
) -> Result<EdgeGradient> {
    let buf = single_edge(spec, params, config, edge, true, Want { jac: false, dalpha: false })?;
    Ok(EdgeGradient { g: buf.g, similarity: buf.c, range: buf.d, range_similarity: None, coincident: buf.coincident })
}

/// Gradient of `f_d(q_ij)` with respect to `x_i`, equal to `-f_d'(q_ij) beta_g,ij`.
///
/// `q_ij` is linear in the positions, so the gradient stays defined when the
/// agents coincide.
pub fn edge_gradient_range(
    spec: &FormationSpec,
    params: &ReshapingParams,
    config: &Configuration,
    edge: (usize, usize),
) -> Result<EdgeGradient> {
    let buf = single_edge(spec, params, config, edge, false, Want { jac: false, dalpha: false })?;
    Ok(EdgeGradient {
        g: buf.g,
        similarity: buf.c,
        range: buf.d,
        range_similarity: buf.q,
        coincident: buf.coincident,
    })
}

/// Jacobian of the bearing edge gradient `g_ij` with respect to `x_i`, row-major `n x n`.
///
/// The Jacobian with respect to `x_j` is its negation.
pub fn grad_g_wrt_state(
    spec: &FormationSpec,
    params: &ReshapingParams,
    config: &Configuration,
    edge: (usize, usize),
) -> Result<Vec<f64>> {
    Ok(single_edge(spec, params, config, edge, true, Want { jac: true, dalpha: false })?.jac)
}

/// Jacobian of the range edge gradient with respect to `x_i`: `f_d''(q) beta_g beta_g^T`.
pub fn grad_g_range_wrt_state(
    spec: &FormationSpec,
    params: &ReshapingParams,
    config: &Configuration,
    edge: (usize, usize),
) -> Result<Vec<f64>> {
    Ok(single_edge(spec, params, config, edge, false, Want { jac: true, dalpha: false })?.jac)
}

/// `dg_ij/dalpha` of the bearing edge gradient, row-major `n x dim(alpha)`
/// over the stacked parameter vector (range columns are zero).
pub fn grad_g_wrt_params(
    spec: &FormationSpec,
    params: &ReshapingParams,
    config: &Configuration,
    edge: (usize, usize),
) -> Result<Vec<f64>> {
    Ok(single_edge(spec, params, config, edge, true, Want { jac: false, dalpha: true })?.dalpha)
}

/// `dg_ij/dalpha` of the range edge gradient over the stacked parameter vector.
pub fn grad_g_range_wrt_params(
    spec: &FormationSpec,
    params: &ReshapingParams,
    config: &Configuration,
    edge: (usize, usize),
) -> Result<Vec<f64>> {
    Ok(single_edge(spec, params, config, edge, false, Want { jac: false, dalpha: true })?.dalpha)
}

//! Closed-loop simulation with forward sensitivities and path-length quadrature.
//!
//! The integrated state is `[x | S | L | G]`: positions, the sensitivity
//! matrices `S_i = dx_i/dalpha` (each `n x P`, row-major), per-agent path
//! lengths, and the running derivative of the total path length w.r.t. alpha.
//! `S` and `G` are present only when sensitivities are requested.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{cost_unchecked, edge_kernel, ControllerConfig, EdgeBuf, Want, COINCIDENT_EPS};
use crate::error::{Error, Result};
use crate::formation::{distance, Configuration, FormationSpec};
use crate::ode::{Dopri5, OdeRhs, Rk4};

/// Speed below which an agent's direction of motion is treated as undefined.
pub const SPEED_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Integrator {
    Rk4 { dt: f64 },
    Dopri5 { atol: f64, rtol: f64 },
}

impl Default for Integrator {
    fn default() -> Self {
        Integrator::Dopri5 { atol: 1e-9, rtol: 1e-7 }
    }
}

/// Smooth weight that switches off the path-length integrand near coincidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub epsilon: f64,
    pub p: u32,
}

impl Default for Bump {
    fn default() -> Self {
        Self { epsilon: 1e-3, p: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: f64,
    pub integrator: Integrator,
    /// Separation that connected agents may not enter during a regular step.
    pub guard_eps: f64,
    pub bump: Option<Bump>,
    /// Stop once `||u|| <` this value and hold the state until the horizon.
    pub early_exit: Option<f64>,
    pub max_step: Option<f64>,
    /// Keep every accepted step instead of only the endpoints.
    pub dense: bool,
    pub max_steps: usize,
}

impl SimConfig {
    /// Defaults scaled to the desired formation: guard band `1e-4` of its diameter.
    pub fn for_spec(spec: &FormationSpec) -> Self {
        Self {
            horizon: 20.0,
            integrator: Integrator::default(),
            guard_eps: 1e-4 * spec.desired().diameter(),
            bump: None,
            early_exit: Some(1e-8),
            max_step: None,
            dense: false,
            max_steps: 200_000,
        }
    }

    pub fn fixed_step(mut self, dt: f64) -> Self {
        self.integrator = Integrator::Rk4 { dt };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return bad("horizon must be positive");
        }
        if !(self.guard_eps > 0.0) {
            return bad("guard separation must be positive");
        }
        match self.integrator {
            Integrator::Rk4 { dt } if !(dt > 0.0) => return bad("step size must be positive"),
            Integrator::Dopri5 { atol, rtol } if !(atol > 0.0) || !(rtol >= 0.0) => {
                return bad("tolerances must be positive")
            }
            _ => {}
        }
        if let Some(b) = self.bump {
            if !(b.epsilon > 0.0) || b.p < 1 {
                return bad("bump needs epsilon > 0 and p >= 1");
            }
        }
        if matches!(self.max_step, Some(h) if !(h > 0.0)) {
            return bad("max_step must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardAction {
    /// Explicit Euler step carrying the pair through the guard band.
    Escape,
    /// The pair kept approaching after an escape and now slides as one point.
    Merge,
    /// A sliding pair separated again.
    Release,
}

/// One activation of the close-approach guard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardEvent {
    pub t: f64,
    pub i: usize,
    pub j: usize,
    pub action: GuardAction,
    /// Separation when the guard fired.
    pub separation: f64,
    /// Length of the Euler step for escapes, zero otherwise.
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub dim: usize,
    pub num_agents: usize,
    pub num_params: usize,
    pub times: Vec<f64>,
    /// Stacked positions per recorded time.
    pub states: Vec<Vec<f64>>,
    /// Per-agent accumulated path length per recorded time.
    pub path_lengths: Vec<Vec<f64>>,
    /// Stacked sensitivities per recorded time; empty unless recorded densely.
    pub sensitivities: Vec<Vec<f64>>,
    pub events: Vec<GuardEvent>,
    /// Time at which the early-exit criterion fired.
    pub exit_time: Option<f64>,
    pub terminal_cost: f64,
    /// `S(T)`, agent-major, each block `n x P` row-major.
    pub final_sensitivity: Option<Vec<f64>>,
    /// Derivative of the (weighted) total path length w.r.t. alpha.
    pub path_gradient: Option<Vec<f64>>,
    pub steps: usize,
}

impl TrajectoryRecord {
    pub fn initial_state(&self) -> Configuration {
        Configuration::new(self.dim, self.states[0].clone()).expect("recorded state")
    }

    pub fn final_state(&self) -> Configuration {
        Configuration::new(self.dim, self.states.last().expect("non-empty record").clone()).expect("recorded state")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("non-empty record")
    }

    pub fn final_path_lengths(&self) -> &[f64] {
        self.path_lengths.last().expect("non-empty record")
    }

    pub fn total_path_length(&self) -> f64 {
        self.final_path_lengths().iter().sum()
    }

    /// `n x P` block of agent `i` in `S(T)`.
    pub fn final_sensitivity_of(&self, i: usize) -> Option<&[f64]> {
        let b = self.dim * self.num_params;
        self.final_sensitivity.as_ref().map(|s| &s[i * b..(i + 1) * b])
    }

    /// Writes the `t,agent,x,y[,...]` table.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string(), "agent".to_string()];
        for k in 0..self.dim {
            header.push(match k {
                0 => "x".into(),
                1 => "y".into(),
                2 => "z".into(),
                _ => format!("x{k}"),
            });
        }
        wr.write_record(&header)?;
        for (t, x) in self.times.iter().zip(&self.states) {
            for a in 0..self.num_agents {
                let mut row = vec![t.to_string(), a.to_string()];
                row.extend(x[a * self.dim..(a + 1) * self.dim].iter().map(|v| v.to_string()));
                wr.write_record(&row)?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn sidecar(&self) -> TrajectorySidecar {
        TrajectorySidecar {
            num_agents: self.num_agents,
            dim: self.dim,
            events: self.events.clone(),
            path_lengths: self.final_path_lengths().to_vec(),
            path_length_series: self.path_lengths.clone(),
            total_path_length: self.total_path_length(),
            terminal_cost: self.terminal_cost,
            exit_time: self.exit_time,
            horizon: self.final_time(),
        }
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`; returns the CSV path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        self.write_csv(std::fs::File::create(&csv_path)?)?;
        let side = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(csv_path.with_extension("json"), side)?;
        Ok(csv_path)
    }

    /// Reads a trajectory written by [`TrajectoryRecord::save`].
    pub fn load(csv_path: &Path) -> Result<Self> {
        let side: TrajectorySidecar = serde_json::from_str(&std::fs::read_to_string(csv_path.with_extension("json"))?)?;
        Self::from_parts(std::fs::File::open(csv_path)?, side)
    }

    pub fn from_parts(csv_reader: impl Read, side: TrajectorySidecar) -> Result<Self> {
        let (na, dim) = (side.num_agents, side.dim);
        let mut rd = csv::Reader::from_reader(csv_reader);
        let mut times = Vec::new();
        let mut states: Vec<Vec<f64>> = Vec::new();
        for (row_idx, rec) in rd.records().enumerate() {
            let rec = rec?;
            let parse = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidConfig(format!("bad trajectory row {row_idx}")))
            };
            let agent = row_idx % na;
            if agent == 0 {
                times.push(parse(0)?);
                states.push(vec![0.0; na * dim]);
            }
            let x = states.last_mut().expect("pushed above");
            for k in 0..dim {
                x[agent * dim + k] = parse(2 + k)?;
            }
        }
        if times.is_empty() || states.len() != side.path_length_series.len() {
            return Err(Error::InvalidConfig("trajectory table and sidecar disagree".into()));
        }
        Ok(Self {
            dim,
            num_agents: na,
            num_params: 0,
            times,
            states,
            path_lengths: side.path_length_series,
            sensitivities: Vec::new(),
            events: side.events,
            exit_time: side.exit_time,
            terminal_cost: side.terminal_cost,
            final_sensitivity: None,
            path_gradient: None,
            steps: 0,
        })
    }
}

/// JSON companion of a trajectory table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySidecar {
    pub num_agents: usize,
    pub dim: usize,
    pub events: Vec<GuardEvent>,
    pub path_lengths: Vec<f64>,
    pub path_length_series: Vec<Vec<f64>>,
    pub total_path_length: f64,
    pub terminal_cost: f64,
    pub exit_time: Option<f64>,
    pub horizon: f64,
}

/// Single-edge bump `phi_e(d)`: 1 for `d >= epsilon`, smoothly 0 at `d = 0`.
pub fn bump_edge(d: f64, epsilon: f64, p: u32) -> f64 {
    if d >= epsilon {
        return 1.0;
    }
    let r2p = (d / epsilon).powi(2 * p as i32);
    1.0 - (1.0 + 1.0 / (r2p - 1.0)).exp()
}

/// `d phi_e / d d`.
pub fn bump_edge_derivative(d: f64, epsilon: f64, p: u32) -> f64 {
    if d >= epsilon || d <= 0.0 {
        return 0.0;
    }
    let r = d / epsilon;
    let r2p = r.powi(2 * p as i32);
    let e = (1.0 + 1.0 / (r2p - 1.0)).exp();
    if e == 0.0 {
        return 0.0;
    }
    e * 2.0 * p as f64 * r.powi(2 * p as i32 - 1) / (epsilon * (r2p - 1.0).powi(2))
}

/// Product of edge bumps over the ranges of an agent's bearing neighbours.
pub fn bump_weight(ranges: &[f64], epsilon: f64, p: u32) -> f64 {
    ranges.iter().map(|&d| bump_edge(d, epsilon, p)).product()
}

/// Per-agent path-length integrand `||u_i||`, weighted by the bump when given.
pub fn path_length_integrand(config: &Configuration, ctrl: &ControllerConfig, bump: Option<Bump>) -> Result<Vec<f64>> {
    let u = crate::controller::control(config, ctrl)?;
    let n = config.dim();
    let nbrs = neighbours(ctrl.spec());
    Ok((0..config.num_agents())
        .map(|i| {
            let speed = u[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt();
            let w = bump.map_or(1.0, |b| {
                let ranges: Vec<f64> = nbrs[i].iter().map(|&j| distance(config.agent(i), config.agent(j))).collect();
                bump_weight(&ranges, b.epsilon, b.p)
            });
            w * speed
        })
        .collect())
}

fn neighbours(spec: &FormationSpec) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); spec.num_agents()];
    for (i, j) in spec.graph().bearing_edges() {
        out[i].push(j);
    }
    out
}

struct Layout {
    n: usize,
    na: usize,
    np: usize,
    sens: bool,
}

impl Layout {
    fn nx(&self) -> usize {
        self.n * self.na
    }
    fn s_off(&self) -> usize {
        self.nx()
    }
    fn block(&self) -> usize {
        self.n * self.np
    }
    fn l_off(&self) -> usize {
        self.nx() + if self.sens { self.na * self.block() } else { 0 }
    }
    fn g_off(&self) -> usize {
        self.l_off() + self.na
    }
    fn len(&self) -> usize {
        self.g_off() + if self.sens { self.np } else { 0 }
    }
}

struct Dynamics<'a> {
    ctrl: &'a ControllerConfig,
    lay: Layout,
    bump: Option<Bump>,
    nbrs: Vec<Vec<usize>>,
    leader: Vec<bool>,
    buf: EdgeBuf,
    /// Per undirected edge: the pair is sliding as one point.
    merged: Vec<bool>,
    /// Connected groups of merged agents with more than one member.
    groups: Vec<Vec<usize>>,
}

impl<'a> Dynamics<'a> {
    fn new(ctrl: &'a ControllerConfig, sens: bool, bump: Option<Bump>) -> Self {
        let spec = ctrl.spec();
        let lay = Layout { n: spec.dim(), na: spec.num_agents(), np: ctrl.num_params(), sens };
        let leader = (0..lay.na).map(|i| ctrl.is_leader(i)).collect();
        let buf = EdgeBuf::new(lay.n, lay.np);
        let merged = vec![false; spec.edges().len()];
        Self { ctrl, lay, bump, nbrs: neighbours(spec), leader, buf, merged, groups: Vec::new() }
    }

    fn set_merged(&mut self, edge: usize, on: bool) {
        self.merged[edge] = on;
        let na = self.lay.na;
        let mut root: Vec<usize> = (0..na).collect();
        fn find(root: &mut [usize], a: usize) -> usize {
            let mut r = a;
            while root[r] != r {
                r = root[r];
            }
            root[a] = r;
            r
        }
        for (k, e) in self.ctrl.spec().edges().iter().enumerate() {
            if self.merged[k] {
                let (a, b) = (find(&mut root, e.i), find(&mut root, e.j));
                root[a.max(b)] = a.min(b);
            }
        }
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); na];
        for a in 0..na {
            let r = find(&mut root, a);
            groups[r].push(a);
        }
        self.groups = groups.into_iter().filter(|g| g.len() > 1).collect();
    }

    fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        let (a, b) = (i.min(j), i.max(j));
        self.ctrl.spec().edges().iter().position(|e| e.i == a && e.j == b)
    }

    /// Evaluates the right-hand side; with `average` unset, merged groups
    /// keep their individual (other-edge) velocities.
    fn field(&mut self, y: &[f64], dy: &mut [f64], average: bool) {
        let Layout { n, na, np, sens } = self.lay;
        let (s_off, l_off, g_off, blk) = (self.lay.s_off(), self.lay.l_off(), self.lay.g_off(), self.lay.block());
        dy.iter_mut().for_each(|v| *v = 0.0);
        let ctrl = self.ctrl;
        let want = Want { jac: sens, dalpha: sens };
        for (idx, e) in ctrl.spec().edges().iter().enumerate() {
            let (i, j) = (e.i, e.j);
            let (xi, xj) = (&y[i * n..(i + 1) * n], &y[j * n..(j + 1) * n]);
            edge_kernel(
                ctrl.params(),
                if self.merged[idx] { 0.0 } else { ctrl.bearing_weight() },
                ctrl.range_weight(),
                xi,
                xj,
                &e.bearing,
                e.range,
                want,
                &mut self.buf,
            );
            let b = &self.buf;
            for k in 0..n {
                dy[i * n + k] -= b.g[k];
                dy[j * n + k] += b.g[k];
            }
            if sens {
                let (si, sj) = (s_off + i * blk, s_off + j * blk);
                for r in 0..n {
                    for p in 0..np {
                        let mut m = b.dalpha[r * np + p];
                        for s in 0..n {
                            m += b.jac[r * n + s] * (y[si + s * np + p] - y[sj + s * np + p]);
                        }
                        dy[si + r * np + p] -= m;
                        dy[sj + r * np + p] += m;
                    }
                }
            }
        }
        for i in 0..na {
            if self.leader[i] {
                dy[i * n..(i + 1) * n].iter_mut().for_each(|v| *v = 0.0);
                if sens {
                    dy[s_off + i * blk..s_off + (i + 1) * blk].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        if average {
            for g in &self.groups {
                let fixed = g.iter().any(|&a| self.leader[a]);
                let inv = 1.0 / g.len() as f64;
                let mut avg = |off: usize, width: usize| {
                    for k in 0..width {
                        let m = if fixed { 0.0 } else { g.iter().map(|&a| dy[off + a * width + k]).sum::<f64>() * inv };
                        for &a in g {
                            dy[off + a * width + k] = m;
                        }
                    }
                };
                avg(0, n);
                if sens {
                    avg(s_off, blk);
                }
            }
        }
        for i in 0..na {
            let speed = dy[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt();
            let xi = &y[i * n..(i + 1) * n];
            let w = match self.bump {
                Some(bp) => self.nbrs[i]
                    .iter()
                    .map(|&j| bump_edge(distance(xi, &y[j * n..(j + 1) * n]), bp.epsilon, bp.p))
                    .product(),
                None => 1.0,
            };
            dy[l_off + i] = w * speed;
            if !sens {
                continue;
            }
            let si = s_off + i * blk;
            if speed > SPEED_EPS && w > 0.0 {
                for p in 0..np {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += dy[i * n + k] * dy[si + k * np + p];
                    }
                    dy[g_off + p] += w * acc / speed;
                }
            }
            if let (Some(bp), true) = (self.bump, w < 1.0 && speed > 0.0) {
                for (a, &j) in self.nbrs[i].iter().enumerate() {
                    let xj = &y[j * n..(j + 1) * n];
                    let d = distance(xi, xj);
                    let dphi = bump_edge_derivative(d, bp.epsilon, bp.p);
                    if dphi == 0.0 || d < COINCIDENT_EPS {
                        continue;
                    }
                    let others: f64 = self.nbrs[i]
                        .iter()
                        .enumerate()
                        .filter(|&(b, _)| b != a)
                        .map(|(_, &l)| bump_edge(distance(xi, &y[l * n..(l + 1) * n]), bp.epsilon, bp.p))
                        .product();
                    let sj = s_off + j * blk;
                    for p in 0..np {
                        let mut dd = 0.0;
                        for k in 0..n {
                            dd += (xj[k] - xi[k]) / d * (y[sj + k * np + p] - y[si + k * np + p]);
                        }
                        dy[g_off + p] += speed * others * dphi * dd;
                    }
                }
            }
        }
    }
}

impl OdeRhs for Dynamics<'_> {
    fn eval(&mut self, _t: f64, y: &[f64], dy: &mut [f64]) {
        self.field(y, dy, true);
    }
}

enum Stepper {
    Rk4(Rk4),
    Dopri(Dopri5, f64, f64),
}

impl Stepper {
    fn k1(&self) -> &[f64] {
        match self {
            Stepper::Rk4(s) => s.k1(),
            Stepper::Dopri(s, ..) => s.k1(),
        }
    }
    fn k1_mut(&mut self) -> &mut [f64] {
        match self {
            Stepper::Rk4(s) => s.k1_mut(),
            Stepper::Dopri(s, ..) => s.k1_mut(),
        }
    }
}

/// Worst connected pair entering the guard band along the straight segment
/// from `x0` to `x1`: `(i, j, start separation, closest separation)`.
fn guard_violation(
    spec: &FormationSpec,
    skip: &[bool],
    n: usize,
    x0: &[f64],
    x1: &[f64],
    eps: f64,
) -> Option<(usize, usize, f64, f64)> {
    let mut worst: Option<(usize, usize, f64, f64)> = None;
    for e in spec.edges().iter().zip(skip).filter(|(_, s)| !**s).map(|(e, _)| e) {
        let (i, j) = (e.i, e.j);
        let mut e0 = vec![0.0; n];
        let mut de = vec![0.0; n];
        for k in 0..n {
            e0[k] = x0[j * n + k] - x0[i * n + k];
            de[k] = (x1[j * n + k] - x1[i * n + k]) - e0[k];
        }
        let dd: f64 = de.iter().map(|v| v * v).sum();
        let s = if dd > 0.0 { (-e0.iter().zip(&de).map(|(a, b)| a * b).sum::<f64>() / dd).clamp(0.0, 1.0) } else { 0.0 };
        let dmin = e0.iter().zip(&de).map(|(a, b)| (a + s * b).powi(2)).sum::<f64>().sqrt();
        let d0 = e0.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dmin < eps && worst.is_none_or(|w| dmin < w.3) {
            worst = Some((i, j, d0, dmin));
        }
    }
    worst
}

/// Largest relative displacement of a connected pair over a step, as a
/// fraction of their separation at the start.
fn relative_motion(spec: &FormationSpec, skip: &[bool], n: usize, x0: &[f64], x1: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for e in spec.edges().iter().zip(skip).filter(|(_, s)| !**s).map(|(e, _)| e) {
        let (i, j) = (e.i, e.j);
        let mut d0 = 0.0;
        let mut dd = 0.0;
        for k in 0..n {
            let a = x0[j * n + k] - x0[i * n + k];
            let b = x1[j * n + k] - x1[i * n + k] - a;
            d0 += a * a;
            dd += b * b;
        }
        worst = worst.max((dd / d0).sqrt());
    }
    worst
}

/// Integrates `xdot = u(x)` from `x0` over `[0, T]`, optionally with the
/// forward sensitivities `S = dx/dalpha` and the path-length gradient.
pub fn simulate(ctrl: &ControllerConfig, x0: &Configuration, sim: &SimConfig, with_sensitivity: bool) -> Result<TrajectoryRecord> {
    sim.validate()?;
    let spec = ctrl.spec();
    if x0.num_agents() != spec.num_agents() || x0.dim() != spec.dim() {
        return Err(Error::InvalidConfig("initial configuration does not match the formation".into()));
    }
    if x0.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(0.0));
    }
    for e in spec.edges() {
        let d = distance(x0.agent(e.i), x0.agent(e.j));
        if d < sim.guard_eps {
            return Err(Error::GuardFailure { t: 0.0, i: e.i, j: e.j, distance: d });
        }
    }

    let mut rhs = Dynamics::new(ctrl, with_sensitivity, sim.bump);
    let lay = Layout { ..rhs.lay };
    let (n, na, np, nx) = (lay.n, lay.na, lay.np, lay.nx());
    let dim = lay.len();
    let mut y = vec![0.0; dim];
    y[..nx].copy_from_slice(x0.as_slice());
    let mut y1 = vec![0.0; dim];
    let horizon = sim.horizon;
    let h_max = sim.max_step.unwrap_or(f64::INFINITY).min(horizon);

    let mut stepper = match sim.integrator {
        Integrator::Rk4 { .. } => Stepper::Rk4(Rk4::new(dim)),
        Integrator::Dopri5 { atol, rtol } => Stepper::Dopri(Dopri5::new(dim), atol, rtol),
    };
    rhs.eval(0.0, &y, stepper.k1_mut());

    let sens_slice = |y: &[f64]| y[lay.s_off()..lay.l_off()].to_vec();
    let mut rec = TrajectoryRecord {
        dim: n,
        num_agents: na,
        num_params: if with_sensitivity { np } else { 0 },
        times: vec![0.0],
        states: vec![y[..nx].to_vec()],
        path_lengths: vec![vec![0.0; na]],
        sensitivities: if with_sensitivity { vec![sens_slice(&y)] } else { Vec::new() },
        events: Vec::new(),
        exit_time: None,
        terminal_cost: 0.0,
        final_sensitivity: None,
        path_gradient: None,
        steps: 0,
    };

    let mut t = 0.0;
    let nominal = match sim.integrator {
        Integrator::Rk4 { dt } => dt.min(h_max),
        Integrator::Dopri5 { .. } => h_max,
    };
    let mut h = match sim.integrator {
        Integrator::Rk4 { dt } => dt,
        Integrator::Dopri5 { .. } => 1e-2,
    }
    .min(h_max);
    let h_floor = 1e-14 * horizon.max(1.0);
    let mut attempts = 0usize;

    while t < horizon {
        attempts += 1;
        if attempts > sim.max_steps {
            return Err(Error::Degenerate(format!("step budget of {} exhausted at t={t}", sim.max_steps)));
        }
        if let Some(tol) = sim.early_exit {
            let speed = stepper.k1()[..nx].iter().map(|v| v * v).sum::<f64>().sqrt();
            if speed < tol {
                rec.exit_time = Some(t);
                break;
            }
        }
        let last = t + h >= horizon;
        let h_try = if last { horizon - t } else { h };
        let err = match &mut stepper {
            Stepper::Rk4(s) => {
                s.step(&mut rhs, t, &y, h_try, &mut y1);
                0.0
            }
            Stepper::Dopri(s, atol, rtol) => s.step(&mut rhs, t, &y, h_try, &mut y1, *atol, *rtol),
        };
        if !err.is_finite() || err > 1.0 {
            h = h_try * (0.9 * err.powf(-0.2)).clamp(0.1, 0.5);
            if !h.is_finite() || h < h_floor {
                return Err(Error::StepSizeUnderflow(t));
            }
            continue;
        }
        let fixed = matches!(stepper, Stepper::Rk4(..));
        if fixed && h_try > h_floor && relative_motion(spec, &rhs.merged, n, &y[..nx], &y1[..nx]) > 0.25 {
            // a pair rotates fast relative to its separation
            h = h_try * 0.5;
            continue;
        }
        if let Some((i, j, d0, _)) = guard_violation(spec, &rhs.merged, n, &y[..nx], &y1[..nx], sim.guard_eps) {
            if d0 > 2.0 * sim.guard_eps && h_try > h_floor {
                h = h_try * 0.5;
                continue;
            }
            let (y_keep, t_keep) = (y.clone(), t);
            let escaped = euler_escape(&mut rhs, &mut stepper, &mut y, &mut t, (i, j, d0), sim, spec, &lay, &mut rec);
            let reapproach = match escaped {
                Ok(()) => t < horizon && approaching(&y, stepper.k1(), n, i, j),
                Err(Error::GuardFailure { .. }) => true,
                Err(e) => return Err(e),
            };
            if reapproach {
                if escaped.is_ok() {
                    rec.events.pop();
                }
                y = y_keep;
                t = t_keep;
                let edge = rhs.edge_index(i, j).expect("guarded pairs are edges");
                let mut before = vec![0.0; dim];
                rhs.field(&y, &mut before, true);
                rhs.set_merged(edge, true);
                if with_sensitivity {
                    merge_jump(&mut rhs, &mut y, (i, j), &before);
                }
                rec.events.push(GuardEvent { t, i, j, action: GuardAction::Merge, separation: d0, step: 0.0 });
                rhs.eval(t, &y, stepper.k1_mut());
                release_separating(&mut rhs, &mut stepper, &mut y, t, sim, &mut rec);
            }
            if sim.dense {
                push_sample(&mut rec, t, &y, &lay);
            }
            continue;
        }
        t = if last { horizon } else { t + h_try };
        std::mem::swap(&mut y, &mut y1);
        match &mut stepper {
            Stepper::Dopri(s, ..) => {
                s.accept();
                h = (h_try * (0.9 * err.max(1e-12).powf(-0.2)).clamp(0.2, 5.0)).min(nominal);
            }
            Stepper::Rk4(s) => {
                rhs.eval(t, &y, s.k1_mut());
                h = (h_try * 2.0).min(nominal);
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(t));
        }
        rec.steps += 1;
        release_separating(&mut rhs, &mut stepper, &mut y, t, sim, &mut rec);
        if sim.dense {
            push_sample(&mut rec, t, &y, &lay);
        }
    }

    if !sim.dense {
        push_sample(&mut rec, t, &y, &lay);
    }
    if t < horizon {
        push_sample(&mut rec, horizon, &y, &lay);
    }
    if !sim.dense {
        let last = rec.times.len() - 1;
        rec.times = vec![rec.times[0], rec.times[last]];
        rec.states = vec![rec.states[0].clone(), rec.states[last].clone()];
        rec.path_lengths = vec![rec.path_lengths[0].clone(), rec.path_lengths[last].clone()];
        rec.sensitivities.clear();
    }
    rec.terminal_cost = cost_unchecked(&y[..nx], ctrl);
    if with_sensitivity {
        rec.final_sensitivity = Some(sens_slice(&y));
        rec.path_gradient = Some(y[lay.g_off()..lay.len()].to_vec());
    }
    Ok(rec)
}

fn push_sample(rec: &mut TrajectoryRecord, t: f64, y: &[f64], lay: &Layout) {
    if rec.times.len() > 1 && rec.times.last() == Some(&t) {
        return;
    }
    rec.times.push(t);
    rec.states.push(y[..lay.nx()].to_vec());
    rec.path_lengths.push(y[lay.l_off()..lay.l_off() + lay.na].to_vec());
    if lay.sens {
        rec.sensitivities.push(y[lay.s_off()..lay.l_off()].to_vec());
    }
}

/// Sensitivity jump when the pair `(i, j)` starts sliding: the group shares
/// the mean sensitivity, and the path-length gradient picks up the change in
/// speed times the derivative of the contact time.
fn merge_jump(rhs: &mut Dynamics<'_>, y: &mut [f64], (i, j): (usize, usize), before: &[f64]) {
    let Layout { n, np, .. } = rhs.lay;
    let (s_off, l_off, g_off, blk) = (rhs.lay.s_off(), rhs.lay.l_off(), rhs.lay.g_off(), rhs.lay.block());
    let r: Vec<f64> = (0..n).map(|k| y[j * n + k] - y[i * n + k]).collect();
    let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let closing = -(0..n).map(|k| r[k] * (before[j * n + k] - before[i * n + k])).sum::<f64>() / rn;
    let mut after = vec![0.0; y.len()];
    rhs.field(y, &mut after, true);
    if closing > 0.0 && rn > 0.0 {
        let rate: f64 = (0..rhs.lay.na).map(|a| before[l_off + a] - after[l_off + a]).sum();
        for p in 0..np {
            let dr: f64 = (0..n).map(|k| r[k] / rn * (y[s_off + j * blk + k * np + p] - y[s_off + i * blk + k * np + p])).sum();
            y[g_off + p] += rate * dr / closing;
        }
    }
    let group = rhs.groups.iter().find(|g| g.contains(&i)).expect("merged pair forms a group").clone();
    let fixed = group.iter().any(|&a| rhs.leader[a]);
    let inv = 1.0 / group.len() as f64;
    for q in 0..blk {
        let m = if fixed { 0.0 } else { group.iter().map(|&a| y[s_off + a * blk + q]).sum::<f64>() * inv };
        for &a in &group {
            y[s_off + a * blk + q] = m;
        }
    }
}

fn approaching(y: &[f64], dy: &[f64], n: usize, i: usize, j: usize) -> bool {
    (0..n).map(|k| (y[j * n + k] - y[i * n + k]) * (dy[j * n + k] - dy[i * n + k])).sum::<f64>() < 0.0
}

/// Best separation direction of a sliding pair: maximizes the opening speed
/// `beta^T w - 2 w_b f_b(beta^T beta_g)` over unit `beta` in the plane of
/// `beta_g` and the relative velocity `w` due to all other terms.
fn separation_direction(ctrl: &ControllerConfig, goal: &[f64], w: &[f64]) -> Option<Vec<f64>> {
    let n = goal.len();
    let w_par: f64 = goal.iter().zip(w).map(|(a, b)| a * b).sum();
    let mut q: Vec<f64> = w.iter().zip(goal).map(|(a, g)| a - w_par * g).collect();
    let wp = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if wp > 0.0 {
        q.iter_mut().for_each(|v| *v /= wp);
    }
    let wb = ctrl.bearing_weight();
    let f = &ctrl.params().bearing;
    const SAMPLES: usize = 256;
    let (mut best, mut best_theta) = (f64::NEG_INFINITY, 0.0);
    for s in 0..=SAMPLES {
        let theta = std::f64::consts::PI * s as f64 / SAMPLES as f64;
        let c = theta.cos();
        let v = c * w_par + theta.sin() * wp - 2.0 * wb * f.value(c);
        if v > best {
            best = v;
            best_theta = theta;
        }
    }
    let scale = w_par.abs() + wp;
    if best <= 1e-9 * scale.max(1e-12) || best <= 0.0 {
        return None;
    }
    let (c, sn) = (best_theta.cos(), best_theta.sin());
    Some((0..n).map(|k| c * goal[k] + sn * q[k]).collect())
}

/// Releases sliding pairs whose other terms now pull them apart, placing
/// them symmetrically about their midpoint just outside the guard band.
fn release_separating(
    rhs: &mut Dynamics<'_>,
    stepper: &mut Stepper,
    y: &mut [f64],
    t: f64,
    sim: &SimConfig,
    rec: &mut TrajectoryRecord,
) {
    if !rhs.merged.iter().any(|m| *m) {
        return;
    }
    let n = rhs.lay.n;
    let l_off = rhs.lay.l_off();
    let mut raw = vec![0.0; y.len()];
    rhs.field(y, &mut raw, false);
    let mut changed = false;
    let ctrl = rhs.ctrl;
    for (idx, e) in ctrl.spec().edges().iter().enumerate() {
        if !rhs.merged[idx] {
            continue;
        }
        let (i, j) = (e.i, e.j);
        let w: Vec<f64> = (0..n).map(|k| raw[j * n + k] - raw[i * n + k]).collect();
        let Some(beta) = separation_direction(ctrl, &e.bearing, &w) else { continue };
        let half = 1.5 * sim.guard_eps;
        let sep = distance(&y[i * n..(i + 1) * n], &y[j * n..(j + 1) * n]);
        let (fi, fj) = (rhs.leader[i], rhs.leader[j]);
        if fi && fj {
            continue;
        }
        let mut moved = [0.0f64; 2];
        for k in 0..n {
            let m = 0.5 * (y[i * n + k] + y[j * n + k]);
            let (ni, nj) = if fi {
                (y[i * n + k], y[i * n + k] + 2.0 * half * beta[k])
            } else if fj {
                (y[j * n + k] - 2.0 * half * beta[k], y[j * n + k])
            } else {
                (m - half * beta[k], m + half * beta[k])
            };
            moved[0] += (ni - y[i * n + k]).powi(2);
            moved[1] += (nj - y[j * n + k]).powi(2);
            y[i * n + k] = ni;
            y[j * n + k] = nj;
        }
        y[l_off + i] += moved[0].sqrt();
        y[l_off + j] += moved[1].sqrt();
        rhs.set_merged(idx, false);
        rec.events.push(GuardEvent { t, i, j, action: GuardAction::Release, separation: sep, step: 0.0 });
        changed = true;
    }
    if changed {
        rhs.eval(t, y, stepper.k1_mut());
    }
}

/// Explicit Euler step with the current derivative, sized to carry the pair
/// `(i, j)` out of the guard band. Sensitivities and quadratures ride along.
#[allow(clippy::too_many_arguments)]
fn euler_escape(
    rhs: &mut Dynamics<'_>,
    stepper: &mut Stepper,
    y: &mut Vec<f64>,
    t: &mut f64,
    pair: (usize, usize, f64),
    sim: &SimConfig,
    spec: &FormationSpec,
    lay: &Layout,
    rec: &mut TrajectoryRecord,
) -> Result<()> {
    let (i, j, d0) = pair;
    let n = lay.n;
    let k1 = stepper.k1().to_vec();
    let mut e = vec![0.0; n];
    let mut w = vec![0.0; n];
    for k in 0..n {
        e[k] = y[j * n + k] - y[i * n + k];
        w[k] = k1[j * n + k] - k1[i * n + k];
    }
    let ww: f64 = w.iter().map(|v| v * v).sum();
    if ww < 1e-28 {
        return Err(Error::GuardFailure { t: *t, i, j, distance: d0 });
    }
    let tau_star = (-e.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / ww).max(0.0);
    let dmin2: f64 = e.iter().zip(&w).map(|(a, b)| (a + tau_star * b).powi(2)).sum();
    let target = 3.0 * sim.guard_eps;
    let mut tau = tau_star + (target * target - dmin2).max(0.0).sqrt() / ww.sqrt();
    let at_end = *t + tau >= sim.horizon;
    if at_end {
        tau = sim.horizon - *t;
    }
    for (v, d) in y.iter_mut().zip(&k1) {
        *v += tau * d;
    }
    *t = if at_end { sim.horizon } else { *t + tau };
    rec.events.push(GuardEvent { t: *t, i, j, action: GuardAction::Escape, separation: d0, step: tau });
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(*t));
    }
    if !at_end {
        for e in spec.edges() {
            let d = distance(&y[e.i * n..(e.i + 1) * n], &y[e.j * n..(e.j + 1) * n]);
            if d < sim.guard_eps {
                return Err(Error::GuardFailure { t: *t, i: e.i, j: e.j, distance: d });
            }
        }
    }
    rhs.eval(*t, y, stepper.k1_mut());
    rec.steps += 1;
    Ok(())
}

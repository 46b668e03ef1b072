//! Sequential quadratic programming for smooth objectives under linear
//! constraints.
//!
//! Each iteration solves `min 1/2 d^T B d + g^T d` subject to the linearized
//! (here: exact) constraints, with `B` a damped BFGS approximation, then
//! backtracks along `d`. Since the feasible set is convex and `x`, `x + d` are
//! feasible, every trial point is feasible. When the quasi-Newton direction
//! fails, the step falls back to the projected gradient direction (`B = I`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reshaping::ShapeConstraints;

/// Objective with gradient. Errors at trial points are treated as `+inf`.
pub trait Objective {
    fn value_and_gradient(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Objective for F {
    fn value_and_gradient(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop when the projected gradient norm falls below this.
    pub gradient_tol: f64,
    /// Stop when the step length falls below this.
    pub step_tol: f64,
    /// Stop after `stall_iterations` consecutive relative decreases below this.
    pub objective_rel_tol: f64,
    pub stall_iterations: usize,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    pub feasibility_tol: f64,
    /// Drop all constraints (diagnostic relaxation).
    pub unconstrained: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 60,
            gradient_tol: 1e-6,
            step_tol: 1e-10,
            objective_rel_tol: 1e-7,
            stall_iterations: 3,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 30,
            feasibility_tol: 1e-8,
            unconstrained: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    /// Projected gradient below tolerance.
    Converged,
    StepTolerance,
    ObjectiveStalled,
    /// Neither the quasi-Newton nor the gradient direction gave a decrease.
    LineSearchFailed,
    MaxIterations,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Start,
    QuasiNewton,
    ProjectedGradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub step_norm: f64,
    pub step_length: f64,
    pub projected_gradient_norm: f64,
    pub max_violation: f64,
    pub kind: StepKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverResult {
    pub x: Vec<f64>,
    pub objective: f64,
    pub gradient: Vec<f64>,
    pub status: SolverStatus,
    pub iterations: usize,
    pub evaluations: usize,
    pub history: Vec<IterationRecord>,
}

struct Qp<'a> {
    cons: &'a ShapeConstraints,
    active: bool,
}

impl Qp<'_> {
    /// Solves `min 1/2 d^T B d + g^T d` with `x + d` feasible.
    fn solve(&self, b: &[f64], g: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let n = g.len();
        let mut q = b.to_vec();
        let c = self.cons;
        if !self.active || (c.eq_rows.is_empty() && c.in_rows.is_empty()) {
            return solve_dense(&mut q, g);
        }
        let mut amat = Vec::with_capacity((c.eq_rows.len() + c.in_rows.len()) * n);
        let mut bvec = Vec::with_capacity(c.eq_rows.len() + c.in_rows.len());
        for (row, rhs) in c.eq_rows.iter().zip(&c.eq_rhs).chain(c.in_rows.iter().zip(&c.in_rhs)) {
            amat.extend_from_slice(row);
            bvec.push(rhs - row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>());
        }
        let sol = quadprog::solve_qp(&mut q, g, &amat, &bvec, c.eq_rows.len(), false)
            .map_err(|e| Error::Qp(e.to_string()))?;
        if sol.sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::Qp("non-finite subproblem solution".into()));
        }
        Ok(sol.sol)
    }
}

/// Unconstrained Newton step `-B^{-1} g` by Cholesky.
fn solve_dense(b: &mut [f64], g: &[f64]) -> Result<Vec<f64>> {
    let n = g.len();
    for j in 0..n {
        for k in 0..j {
            let s: f64 = (0..k).map(|m| b[j * n + m] * b[k * n + m]).sum();
            b[j * n + k] = (b[j * n + k] - s) / b[k * n + k];
        }
        let s: f64 = (0..j).map(|m| b[j * n + m] * b[j * n + m]).sum();
        let d = b[j * n + j] - s;
        if !(d > 0.0) {
            return Err(Error::Qp("model Hessian is not positive definite".into()));
        }
        b[j * n + j] = d.sqrt();
    }
    let mut y: Vec<f64> = g.iter().map(|v| -v).collect();
    for j in 0..n {
        let s: f64 = (0..j).map(|m| b[j * n + m] * y[m]).sum();
        y[j] = (y[j] - s) / b[j * n + j];
    }
    for j in (0..n).rev() {
        let s: f64 = (j + 1..n).map(|m| b[m * n + j] * y[m]).sum();
        y[j] = (y[j] - s) / b[j * n + j];
    }
    Ok(y)
}

fn identity(n: usize) -> Vec<f64> {
    let mut b = vec![0.0; n * n];
    for k in 0..n {
        b[k * n + k] = 1.0;
    }
    b
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `||P(x - g) - x||` with `P` the Euclidean projection onto the feasible set.
pub fn projected_gradient_norm(cons: &ShapeConstraints, x: &[f64], g: &[f64]) -> Result<f64> {
    let qp = Qp { cons, active: true };
    Ok(norm(&qp.solve(&identity(x.len()), g, x)?))
}

/// Minimizes `obj` from the feasible point `x0`.
pub fn minimize(obj: &mut impl Objective, cons: &ShapeConstraints, x0: &[f64], opts: &SolverOptions) -> Result<SolverResult> {
    let n = x0.len();
    if cons.dim != n {
        return Err(Error::InvalidConfig(format!("constraints are over {} variables, start has {n}", cons.dim)));
    }
    let qp = Qp { cons, active: !opts.unconstrained };
    let violation = |x: &[f64]| if opts.unconstrained { 0.0 } else { cons.max_violation(x) };
    let v0 = violation(x0);
    if v0 > opts.feasibility_tol {
        return Err(Error::InfeasibleStart(v0));
    }
    let pg_norm = |x: &[f64], g: &[f64]| -> f64 {
        if opts.unconstrained {
            norm(g)
        } else {
            qp.solve(&identity(n), g, x).map(|d| norm(&d)).unwrap_or(f64::INFINITY)
        }
    };

    let mut x = x0.to_vec();
    let (mut f, mut g) = obj.value_and_gradient(&x)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(0.0));
    }
    let mut evaluations = 1;
    let mut b = identity(n);
    let mut scaled = false;
    let null_proj = if opts.unconstrained { None } else { equality_null_projector(cons)? };
    let mut history = vec![IterationRecord {
        iteration: 0,
        objective: f,
        step_norm: 0.0,
        step_length: 0.0,
        projected_gradient_norm: pg_norm(&x, &g),
        max_violation: violation(&x),
        kind: StepKind::Start,
    }];
    let mut status = SolverStatus::MaxIterations;
    let mut stall = 0;

    for it in 1..=opts.max_iterations {
        if history.last().map(|h| h.projected_gradient_norm).unwrap_or(f64::INFINITY) <= opts.gradient_tol {
            status = SolverStatus::Converged;
            break;
        }
        let mut accepted = None;
        for kind in [StepKind::QuasiNewton, StepKind::ProjectedGradient] {
            let model = if kind == StepKind::QuasiNewton { b.clone() } else { identity(n) };
            let Ok(d) = qp.solve(&model, &g, &x) else { continue };
            let slope = dot(&g, &d);
            let dn = norm(&d);
            if dn <= opts.step_tol || slope >= 0.0 {
                continue;
            }
            let mut t = 1.0;
            for _ in 0..=opts.max_backtracks {
                let trial: Vec<f64> = x.iter().zip(&d).map(|(a, s)| a + t * s).collect();
                evaluations += 1;
                if let Ok((ft, gt)) = obj.value_and_gradient(&trial) {
                    if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft <= f + opts.armijo * t * slope && ft < f {
                        accepted = Some((trial, ft, gt, t, dn, kind));
                        break;
                    }
                }
                t *= opts.backtrack;
                if t * dn <= opts.step_tol {
                    break;
                }
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((x_new, f_new, g_new, t, dn, kind)) = accepted else {
            status = SolverStatus::LineSearchFailed;
            break;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, c)| a - c).collect();
        let mut y: Vec<f64> = g_new.iter().zip(&g).map(|(a, c)| a - c).collect();
        if let Some(p) = &null_proj {
            // steps stay in the null space of the equalities; only the
            // curvature there enters the subproblem
            y = (0..n).map(|r| dot(&p[r * n..(r + 1) * n], &y)).collect();
        }
        if !scaled && dot(&s, &y) > 0.0 {
            let gamma = dot(&y, &y) / dot(&s, &y);
            b.iter_mut().for_each(|v| *v *= gamma);
            scaled = true;
        }
        damped_bfgs_update(&mut b, &s, &y);

        let rel = (f - f_new) / f.abs().max(1e-300);
        x = x_new;
        f = f_new;
        g = g_new;
        history.push(IterationRecord {
            iteration: it,
            objective: f,
            step_norm: t * dn,
            step_length: t,
            projected_gradient_norm: pg_norm(&x, &g),
            max_violation: violation(&x),
            kind,
        });
        stall = if rel < opts.objective_rel_tol { stall + 1 } else { 0 };
        if stall >= opts.stall_iterations {
            status = SolverStatus::ObjectiveStalled;
            break;
        }
        if t * dn <= opts.step_tol {
            status = SolverStatus::StepTolerance;
            break;
        }
    }
    if status == SolverStatus::MaxIterations
        && history.last().map(|h| h.projected_gradient_norm).unwrap_or(f64::INFINITY) <= opts.gradient_tol
    {
        status = SolverStatus::Converged;
    }
    Ok(SolverResult { iterations: history.len() - 1, x, objective: f, gradient: g, status, evaluations, history })
}

/// `I - A^T (A A^T)^{-1} A` over the equality rows, if there are any.
fn equality_null_projector(cons: &ShapeConstraints) -> Result<Option<Vec<f64>>> {
    let (m, n) = (cons.eq_rows.len(), cons.dim);
    if m == 0 {
        return Ok(None);
    }
    let a = &cons.eq_rows;
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            gram[i * m + j] = dot(&a[i], &a[j]);
        }
    }
    let mut p = identity(n);
    for c in 0..n {
        let rhs: Vec<f64> = (0..m).map(|i| -a[i][c]).collect();
        let z = solve_dense(&mut gram.clone(), &rhs)?;
        for r in 0..n {
            p[r * n + c] -= (0..m).map(|i| a[i][r] * z[i]).sum::<f64>();
        }
    }
    Ok(Some(p))
}

/// Powell-damped BFGS update keeping `B` positive definite.
fn damped_bfgs_update(b: &mut [f64], s: &[f64], y: &[f64]) {
    let n = s.len();
    let bs: Vec<f64> = (0..n).map(|r| dot(&b[r * n..(r + 1) * n], s)).collect();
    let sbs = dot(s, &bs);
    if !(sbs > 0.0) {
        return;
    }
    let sy = dot(s, y);
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r: Vec<f64> = (0..n).map(|k| theta * y[k] + (1.0 - theta) * bs[k]).collect();
    let sr = dot(s, &r);
    if !(sr > 0.0) {
        return;
    }
    for i in 0..n {
        for j in 0..n {
            b[i * n + j] += -bs[i] * bs[j] / sbs + r[i] * r[j] / sr;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_constraints(n: usize, lo: f64, hi: f64) -> ShapeConstraints {
        let mut c = ShapeConstraints { dim: n, ..Default::default() };
        for k in 0..n {
            let mut r = vec![0.0; n];
            r[k] = 1.0;
            c.in_rows.push(r.clone());
            c.in_rhs.push(hi);
            r[k] = -1.0;
            c.in_rows.push(r);
            c.in_rhs.push(-lo);
            c.strict.extend([false, false]);
        }
        c
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn unconstrained_rosenbrock() {
        let cons = box_constraints(2, -10.0, 10.0);
        let opts = SolverOptions { max_iterations: 200, objective_rel_tol: 0.0, ..Default::default() };
        let r = minimize(&mut rosenbrock, &cons, &[-1.2, 1.0], &opts).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?} {:?}", r.x, r.status);
        assert!(r.history.windows(2).all(|w| w[1].objective <= w[0].objective));
    }

    #[test]
    fn active_bound_satisfies_kkt() {
        // minimum of Rosenbrock with x0 <= 0.5 lies on the bound
        let mut cons = box_constraints(2, -10.0, 10.0);
        cons.in_rhs[0] = 0.5;
        let opts = SolverOptions { max_iterations: 200, objective_rel_tol: 0.0, ..Default::default() };
        let r = minimize(&mut rosenbrock, &cons, &[-1.2, 1.0], &opts).unwrap();
        assert_eq!(r.status, SolverStatus::Converged);
        assert!((r.x[0] - 0.5).abs() < 1e-8 && (r.x[1] - 0.25).abs() < 1e-5, "{:?}", r.x);
        assert!(projected_gradient_norm(&cons, &r.x, &r.gradient).unwrap() <= 1e-6);
        assert!(r.history.iter().all(|h| h.max_violation <= 1e-8));
    }

    #[test]
    fn equality_constrained_quadratic() {
        // min x^2 + 2 y^2 + 3 z^2 s.t. x + y + z = 1 => x : y : z = 6 : 3 : 2
        let mut obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((x[0] * x[0] + 2.0 * x[1] * x[1] + 3.0 * x[2] * x[2], vec![2.0 * x[0], 4.0 * x[1], 6.0 * x[2]]))
        };
        let cons = ShapeConstraints { dim: 3, eq_rows: vec![vec![1.0; 3]], eq_rhs: vec![1.0], ..Default::default() };
        let r = minimize(&mut obj, &cons, &[1.0, 0.0, 0.0], &SolverOptions::default()).unwrap();
        let expect = [6.0 / 11.0, 3.0 / 11.0, 2.0 / 11.0];
        assert!(r.x.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-7), "{:?}", r.x);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let cons = box_constraints(2, 0.0, 1.0);
        assert!(matches!(
            minimize(&mut rosenbrock, &cons, &[2.0, 0.0], &SolverOptions::default()),
            Err(Error::InfeasibleStart(_))
        ));
    }

    #[test]
    fn relaxation_reaches_lower_objective() {
        let mut cons = box_constraints(2, -10.0, 10.0);
        cons.in_rhs[0] = 0.5;
        let opts = SolverOptions { max_iterations: 200, objective_rel_tol: 0.0, ..Default::default() };
        let tight = minimize(&mut rosenbrock, &cons, &[-1.2, 1.0], &opts).unwrap();
        let loose = minimize(&mut rosenbrock, &cons, &[-1.2, 1.0], &SolverOptions { unconstrained: true, ..opts }).unwrap();
        assert!(loose.objective < tight.objective);
    }

    #[test]
    fn failing_trial_points_are_rejected() {
        // objective undefined right of x = 0.3; the minimizer at 1 is unreachable
        let mut obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            if x[0] > 0.3 {
                return Err(Error::NonFinite(0.0));
            }
            Ok(((x[0] - 1.0).powi(2), vec![2.0 * (x[0] - 1.0)]))
        };
        let cons = ShapeConstraints { dim: 1, ..Default::default() };
        let r = minimize(&mut obj, &cons, &[0.0], &SolverOptions::default()).unwrap();
        assert!(r.x[0] <= 0.3 && r.x[0] > 0.25, "{:?}", r.x);
    }
}

//! Piecewise-quadratic reshaping functions on a regular grid.
//!
//! A spline with `K` knots has `K - 1` quadratic pieces. Each piece is
//! expanded about its upper knot,
//!
//! ```text
//!     Q(chi) = v + s (chi - z_upper) + c (chi - z_upper)^2
//! ```
//!
//! and value/slope continuity at the interior knots leaves `K + 1` free
//! parameters: the value and slope at the top knot and one curvature per
//! piece, ordered from the top piece down. The parameter-to-coefficient map
//! is linear and depends only on the grid.
//!
//! Knots are stored in ascending order; pieces are indexed ascending too.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack used when checking that a bearing argument lies in `[-1, 1]`.
pub const BEARING_DOMAIN_TOL: f64 = 1e-9;

/// Default margin realizing strict inequalities.
pub const DEFAULT_MARGIN: f64 = 1e-2;

/// Regular knot grid on `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineGrid {
    knots: Vec<f64>,
}

impl SplineGrid {
    pub fn new(k: usize, lo: f64, hi: f64) -> Result<Self> {
        if k < 3 {
            return Err(Error::InvalidGrid(format!("need at least 3 knots, got {k}")));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidGrid(format!("invalid span [{lo}, {hi}]")));
        }
        let width = hi - lo;
        let mut knots: Vec<f64> = (0..k).map(|m| lo + width * m as f64 / (k - 1) as f64).collect();
        knots[k - 1] = hi;
        Ok(Self { knots })
    }

    /// Grid on `[-1, 1]` for the bearing reshaping function.
    pub fn bearing(k: usize) -> Result<Self> {
        Self::new(k, -1.0, 1.0)
    }

    /// Grid on `[-half_width, half_width]`.
    pub fn symmetric(k: usize, half_width: f64) -> Result<Self> {
        Self::new(k, -half_width, half_width)
    }

    pub fn k(&self) -> usize {
        self.knots.len()
    }

    pub fn lo(&self) -> f64 {
        self.knots[0]
    }

    pub fn hi(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// Positive knot spacing.
    pub fn step(&self) -> f64 {
        (self.hi() - self.lo()) / (self.k() - 1) as f64
    }

    /// Knots in ascending order.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Knot `chi_k` in descending numbering, `k = 1..=K` with `chi_1 = hi`.
    pub fn knot_descending(&self, k: usize) -> f64 {
        self.knots[self.k() - k]
    }

    /// Index of the knot equal to zero, if any.
    pub fn zero_knot(&self) -> Option<usize> {
        self.knots.iter().position(|&z| z == 0.0)
    }

    /// Ascending index of the piece governing `chi`.
    ///
    /// A knot belongs to the piece on its increasing side, except the top
    /// knot which belongs to the last piece. Arguments outside the span map
    /// to the end pieces.
    pub fn piece(&self, chi: f64) -> usize {
        let last = self.k() - 2;
        if chi.is_nan() || chi <= self.lo() {
            return 0;
        }
        if chi >= self.hi() {
            return last;
        }
        let t = (chi - self.lo()) / (self.hi() - self.lo()) * (self.k() - 1) as f64;
        let mut m = (t.floor() as usize).min(last);
        if m < last && chi >= self.knots[m + 1] {
            m += 1;
        }
        if m > 0 && chi < self.knots[m] {
            m -= 1;
        }
        m
    }
}

/// Linear map from the minimal parameters to per-piece coefficients.
#[derive(Debug, PartialEq)]
struct CoeffMap {
    /// Per ascending piece: rows giving (value, slope, curvature) at the upper knot.
    rows: Vec<[Vec<f64>; 3]>,
}

impl CoeffMap {
    fn new(grid: &SplineGrid) -> Self {
        let k = grid.k();
        let np = k + 1;
        let h = grid.step();
        let unit = |idx: usize| {
            let mut e = vec![0.0; np];
            e[idx] = 1.0;
            e
        };
        let pieces = k - 1;
        let mut rows: Vec<[Vec<f64>; 3]> = Vec::with_capacity(pieces);
        // Top piece first, then walk down using the continuity recursions.
        rows.push([unit(0), unit(1), unit(2)]);
        for r in 1..pieces {
            let [v, s, c] = &rows[r - 1];
            let value: Vec<f64> = (0..np).map(|q| v[q] - s[q] * h + c[q] * h * h).collect();
            let slope: Vec<f64> = (0..np).map(|q| s[q] - 2.0 * c[q] * h).collect();
            rows.push([value, slope, unit(2 + r)]);
        }
        rows.reverse();
        Self { rows }
    }
}

/// Which reshaping function an evaluation refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionKind {
    Bearing,
    Range,
}

/// A C1 piecewise-quadratic function together with its parameters.
#[derive(Clone, Debug)]
pub struct Spline {
    grid: SplineGrid,
    alpha: Vec<f64>,
    map: Arc<CoeffMap>,
    /// Per ascending piece: (value, slope, curvature) about the upper knot.
    coeffs: Vec<[f64; 3]>,
}

impl PartialEq for Spline {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid && self.alpha == other.alpha
    }
}

impl Spline {
    pub fn new(grid: SplineGrid, alpha: Vec<f64>) -> Result<Self> {
        let map = Arc::new(CoeffMap::new(&grid));
        Self::with_map(grid, map, alpha)
    }

    fn with_map(grid: SplineGrid, map: Arc<CoeffMap>, alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != grid.k() + 1 {
            return Err(Error::InvalidConfig(format!(
                "spline with {} knots needs {} parameters, got {}",
                grid.k(),
                grid.k() + 1,
                alpha.len()
            )));
        }
        let coeffs = map
            .rows
            .iter()
            .map(|rows| {
                let dotp = |r: &Vec<f64>| r.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>();
                [dotp(&rows[0]), dotp(&rows[1]), dotp(&rows[2])]
            })
            .collect();
        Ok(Self { grid, alpha, map, coeffs })
    }

    /// Same grid, new parameters.
    pub fn with_alpha(&self, alpha: Vec<f64>) -> Result<Self> {
        Self::with_map(self.grid.clone(), Arc::clone(&self.map), alpha)
    }

    /// Interpolates `target` at every knot; the remaining freedom is fixed by
    /// matching the target's slope at the top knot, estimated with a
    /// second-order one-sided difference.
    pub fn fit(target: impl Fn(f64) -> f64, grid: SplineGrid) -> Result<Self> {
        let hi = grid.hi();
        let h = grid.step();
        let eps = 1e-3 * (grid.hi() - grid.lo());
        let top = target(hi);
        let slope = (3.0 * top - 4.0 * target(hi - eps) + target(hi - 2.0 * eps)) / (2.0 * eps);
        let mut alpha = vec![top, slope];
        let (mut v, mut s) = (top, slope);
        for &z in grid.knots()[..grid.k() - 1].iter().rev() {
            let next = target(z);
            let c = (next - v + s * h) / (h * h);
            alpha.push(c);
            v = next;
            s -= 2.0 * c * h;
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidConfig("target produced non-finite values on the grid".into()));
        }
        Self::new(grid, alpha)
    }

    pub fn grid(&self) -> &SplineGrid {
        &self.grid
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn num_params(&self) -> usize {
        self.alpha.len()
    }

    /// Coefficients `(value, slope, curvature)` of each ascending piece about its upper knot.
    pub fn piece_coefficients(&self) -> &[[f64; 3]] {
        &self.coeffs
    }

    #[inline]
    fn locate(&self, chi: f64) -> (usize, f64) {
        let m = self.grid.piece(chi);
        (m, chi - self.grid.knots[m + 1])
    }

    /// Value, first and second derivative at `chi`; the end pieces extrapolate.
    #[inline]
    pub fn eval(&self, chi: f64) -> (f64, f64, f64) {
        let (m, dz) = self.locate(chi);
        let [v, s, c] = self.coeffs[m];
        (v + dz * (s + c * dz), s + 2.0 * c * dz, 2.0 * c)
    }

    pub fn value(&self, chi: f64) -> f64 {
        self.eval(chi).0
    }

    pub fn derivative(&self, chi: f64) -> f64 {
        self.eval(chi).1
    }

    pub fn second_derivative(&self, chi: f64) -> f64 {
        self.eval(chi).2
    }

    /// Adds `wf * df/dalpha + wfp * df'/dalpha` at `chi` into `out`.
    #[inline]
    pub fn accumulate_param_rows(&self, chi: f64, wf: f64, wfp: f64, out: &mut [f64]) {
        let (m, dz) = self.locate(chi);
        let [v, s, c] = &self.map.rows[m];
        let (cs, cc) = (wf * dz + wfp, wf * dz * dz + 2.0 * wfp * dz);
        for q in 0..out.len() {
            out[q] += wf * v[q] + cs * s[q] + cc * c[q];
        }
    }

    /// `df/dalpha` at `chi`.
    pub fn value_row(&self, chi: f64) -> Vec<f64> {
        let mut row = vec![0.0; self.num_params()];
        self.accumulate_param_rows(chi, 1.0, 0.0, &mut row);
        row
    }

    /// `df'/dalpha` at `chi`.
    pub fn slope_row(&self, chi: f64) -> Vec<f64> {
        let mut row = vec![0.0; self.num_params()];
        self.accumulate_param_rows(chi, 0.0, 1.0, &mut row);
        row
    }

    pub fn to_doc(&self) -> SplineDoc {
        SplineDoc {
            grid: GridDoc { k: self.grid.k(), span: [self.grid.lo(), self.grid.hi()] },
            alpha: self.alpha.clone(),
        }
    }

    pub fn from_doc(doc: SplineDoc) -> Result<Self> {
        let grid = SplineGrid::new(doc.grid.k, doc.grid.span[0], doc.grid.span[1])?;
        Self::new(grid, doc.alpha)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDoc {
    pub k: usize,
    pub span: [f64; 2],
}

/// JSON form of a spline: `{"grid": {"k": K, "span": [lo, hi]}, "alpha": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineDoc {
    pub grid: GridDoc,
    pub alpha: Vec<f64>,
}

/// Initial bearing reshaping function `arccos^2(c) / 2`.
pub fn initial_bearing_target(c: f64) -> f64 {
    c.clamp(-1.0, 1.0).acos().powi(2) / 2.0
}

/// Initial range reshaping function `q^2 / 2`.
pub fn initial_range_target(q: f64) -> f64 {
    q * q / 2.0
}

/// Bearing and optional range reshaping functions of one controller.
///
/// The stacked parameter vector is `alpha_b` followed by `alpha_d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReshapingParams {
    pub bearing: Spline,
    pub range: Option<Spline>,
}

impl ReshapingParams {
    pub fn new(bearing: Spline, range: Option<Spline>) -> Result<Self> {
        if bearing.grid().lo() != -1.0 || bearing.grid().hi() != 1.0 {
            return Err(Error::InvalidGrid("bearing grid must span exactly [-1, 1]".into()));
        }
        if let Some(r) = &range {
            if r.grid().zero_knot().is_none() {
                return Err(Error::GridMissingZero);
            }
        }
        Ok(Self { bearing, range })
    }

    /// Knot interpolants of `arccos^2/2` and, when requested, `q^2/2` on
    /// `[-q_max, q_max]`.
    pub fn initial(k_bearing: usize, range: Option<(usize, f64)>) -> Result<Self> {
        let bearing = Spline::fit(initial_bearing_target, SplineGrid::bearing(k_bearing)?)?;
        let range = range
            .map(|(k, q_max)| Spline::fit(initial_range_target, SplineGrid::symmetric(k, q_max)?))
            .transpose()?;
        Self::new(bearing, range)
    }

    pub fn num_params(&self) -> usize {
        self.bearing.num_params() + self.range.as_ref().map_or(0, Spline::num_params)
    }

    pub fn num_bearing_params(&self) -> usize {
        self.bearing.num_params()
    }

    pub fn alpha(&self) -> Vec<f64> {
        let mut a = self.bearing.alpha().to_vec();
        if let Some(r) = &self.range {
            a.extend_from_slice(r.alpha());
        }
        a
    }

    pub fn with_alpha(&self, alpha: &[f64]) -> Result<Self> {
        if alpha.len() != self.num_params() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                alpha.len()
            )));
        }
        let nb = self.num_bearing_params();
        Ok(Self {
            bearing: self.bearing.with_alpha(alpha[..nb].to_vec())?,
            range: self.range.as_ref().map(|r| r.with_alpha(alpha[nb..].to_vec())).transpose()?,
        })
    }

    /// Parameters multiplied by `gamma`.
    pub fn scaled(&self, gamma: f64) -> Self {
        let alpha: Vec<f64> = self.alpha().iter().map(|a| gamma * a).collect();
        self.with_alpha(&alpha).expect("same length")
    }

    /// Drops the range function.
    pub fn bearing_only(&self) -> Self {
        Self { bearing: self.bearing.clone(), range: None }
    }

    fn spline(&self, which: FunctionKind, chi: f64) -> Result<(&Spline, f64)> {
        match which {
            FunctionKind::Bearing => {
                if !(chi.abs() <= 1.0 + BEARING_DOMAIN_TOL) {
                    return Err(Error::Domain { value: chi, lo: -1.0, hi: 1.0 });
                }
                Ok((&self.bearing, chi.clamp(-1.0, 1.0)))
            }
            FunctionKind::Range => self
                .range
                .as_ref()
                .map(|r| (r, chi))
                .ok_or_else(|| Error::InvalidConfig("no range reshaping function configured".into())),
        }
    }

    pub fn eval_f(&self, which: FunctionKind, chi: f64) -> Result<f64> {
        let (s, x) = self.spline(which, chi)?;
        Ok(s.value(x))
    }

    pub fn eval_f_prime(&self, which: FunctionKind, chi: f64) -> Result<f64> {
        let (s, x) = self.spline(which, chi)?;
        Ok(s.derivative(x))
    }

    pub fn eval_f_second(&self, which: FunctionKind, chi: f64) -> Result<f64> {
        let (s, x) = self.spline(which, chi)?;
        Ok(s.second_derivative(x))
    }

    /// Equality and inequality constraints over the stacked parameter vector.
    pub fn constraints(&self, margin: f64) -> Result<ShapeConstraints> {
        let b = build_bearing_constraints(self.bearing.grid(), margin)?;
        match &self.range {
            None => Ok(b),
            Some(r) => Ok(b.block_diag(&build_range_constraints(r.grid(), margin)?)),
        }
    }

    pub fn to_doc(&self) -> ReshapingParamsDoc {
        ReshapingParamsDoc { bearing: self.bearing.to_doc(), range: self.range.as_ref().map(Spline::to_doc) }
    }

    pub fn from_doc(doc: ReshapingParamsDoc) -> Result<Self> {
        Self::new(Spline::from_doc(doc.bearing)?, doc.range.map(Spline::from_doc).transpose()?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_doc(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReshapingParamsDoc {
    pub bearing: SplineDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<SplineDoc>,
}

/// Linear constraints `A_eq x = b_eq`, `A_in x <= b_in`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShapeConstraints {
    pub dim: usize,
    pub eq_rows: Vec<Vec<f64>>,
    pub eq_rhs: Vec<f64>,
    pub in_rows: Vec<Vec<f64>>,
    pub in_rhs: Vec<f64>,
    /// Marks inequalities that stand for a strict inequality tightened by the margin.
    pub strict: Vec<bool>,
}

impl ShapeConstraints {
    fn new(dim: usize) -> Self {
        Self { dim, ..Default::default() }
    }

    fn push_eq(&mut self, row: Vec<f64>, rhs: f64) {
        self.eq_rows.push(row);
        self.eq_rhs.push(rhs);
    }

    fn push_le(&mut self, row: Vec<f64>, rhs: f64, strict: bool) {
        self.in_rows.push(row);
        self.in_rhs.push(rhs);
        self.strict.push(strict);
    }

    /// Constraints on the concatenation `(x, y)` of two parameter blocks.
    pub fn block_diag(&self, other: &ShapeConstraints) -> ShapeConstraints {
        let dim = self.dim + other.dim;
        let pad = |row: &[f64], left: bool| {
            let mut r = vec![0.0; dim];
            if left {
                r[..self.dim].copy_from_slice(row);
            } else {
                r[self.dim..].copy_from_slice(row);
            }
            r
        };
        let mut out = ShapeConstraints::new(dim);
        for (r, b) in self.eq_rows.iter().zip(&self.eq_rhs) {
            out.push_eq(pad(r, true), *b);
        }
        for (r, b) in other.eq_rows.iter().zip(&other.eq_rhs) {
            out.push_eq(pad(r, false), *b);
        }
        for ((r, b), s) in self.in_rows.iter().zip(&self.in_rhs).zip(&self.strict) {
            out.push_le(pad(r, true), *b, *s);
        }
        for ((r, b), s) in other.in_rows.iter().zip(&other.in_rhs).zip(&other.strict) {
            out.push_le(pad(r, false), *b, *s);
        }
        out
    }

    /// Largest violation over all constraints (0 when feasible).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let dotp = |r: &Vec<f64>| r.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let eq = self.eq_rows.iter().zip(&self.eq_rhs).map(|(r, b)| (dotp(r) - b).abs());
        let ineq = self.in_rows.iter().zip(&self.in_rhs).map(|(r, b)| (dotp(r) - b).max(0.0));
        eq.chain(ineq).fold(0.0, f64::max)
    }

    pub fn is_feasible(&self, x: &[f64], tol: f64) -> bool {
        self.max_violation(x) <= tol
    }

    /// The same constraints with every strict inequality's margin replaced by `margin`.
    pub fn with_margin(&self, margin: f64) -> ShapeConstraints {
        let mut out = self.clone();
        for (b, s) in out.in_rhs.iter_mut().zip(&self.strict) {
            if *s {
                *b = -margin;
            }
        }
        out
    }
}

/// `f(1) = 0`, `f'(1) <= 0` and `f'(chi_k) <= -margin` at every other knot.
///
/// The bottom knot is included: `f'` is piecewise linear, so negativity on
/// the last piece needs a condition at both of its ends.
pub fn build_bearing_constraints(grid: &SplineGrid, margin: f64) -> Result<ShapeConstraints> {
    let probe = Spline::new(grid.clone(), vec![0.0; grid.k() + 1])?;
    let mut c = ShapeConstraints::new(grid.k() + 1);
    let top = grid.hi();
    c.push_eq(probe.value_row(top), 0.0);
    c.push_le(probe.slope_row(top), 0.0, false);
    for &z in grid.knots()[..grid.k() - 1].iter().rev() {
        c.push_le(probe.slope_row(z), -margin, true);
    }
    Ok(c)
}

/// Parabola-like constraints for the range function: `f(0) = f'(0) = 0`,
/// `f'` negative at knots below zero and positive above, non-negative slope
/// and positive curvature on the top piece, non-positive slope at the bottom
/// knot and positive curvature on the bottom piece.
pub fn build_range_constraints(grid: &SplineGrid, margin: f64) -> Result<ShapeConstraints> {
    if grid.zero_knot().is_none() {
        return Err(Error::GridMissingZero);
    }
    let k = grid.k();
    let probe = Spline::new(grid.clone(), vec![0.0; k + 1])?;
    let neg = |row: Vec<f64>| row.into_iter().map(|v| -v).collect::<Vec<_>>();
    let unit = |idx: usize| {
        let mut e = vec![0.0; k + 1];
        e[idx] = 1.0;
        e
    };
    let mut c = ShapeConstraints::new(k + 1);
    c.push_eq(probe.value_row(0.0), 0.0);
    c.push_eq(probe.slope_row(0.0), 0.0);
    for &z in grid.knots() {
        if z < 0.0 {
            c.push_le(probe.slope_row(z), -margin, true);
        } else if z > 0.0 {
            c.push_le(neg(probe.slope_row(z)), -margin, true);
        }
    }
    // top piece: slope >= 0, curvature > 0
    c.push_le(neg(unit(1)), 0.0, false);
    c.push_le(neg(unit(2)), -margin, true);
    // bottom: slope at the last knot <= 0, curvature of the last piece > 0
    c.push_le(probe.slope_row(grid.lo()), 0.0, false);
    c.push_le(neg(unit(k)), -margin, true);
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn rank(rows: &[Vec<f64>]) -> usize {
        let mut m: Vec<Vec<f64>> = rows.to_vec();
        let (nr, nc) = (m.len(), m.first().map_or(0, Vec::len));
        let mut r = 0;
        for col in 0..nc {
            let Some(p) = (r..nr).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())) else {
                break;
            };
            if m[p][col].abs() < 1e-10 {
                continue;
            }
            m.swap(r, p);
            for i in 0..nr {
                if i != r {
                    let f = m[i][col] / m[r][col];
                    for j in 0..nc {
                        m[i][j] -= f * m[r][j];
                    }
                }
            }
            r += 1;
        }
        r
    }

    #[test]
    fn grid_basics() {
        let g = SplineGrid::bearing(7).unwrap();
        assert_eq!(g.knots()[0], -1.0);
        assert_eq!(g.knots()[6], 1.0);
        assert_eq!(g.knot_descending(1), 1.0);
        assert_eq!(g.knot_descending(7), -1.0);
        assert_eq!(g.zero_knot(), Some(3));
        for w in g.knots().windows(2) {
            assert!((w[1] - w[0] - g.step()).abs() < 1e-12);
        }
        assert!(SplineGrid::new(2, -1.0, 1.0).is_err());
        assert!(SplineGrid::new(5, 1.0, 1.0).is_err());
    }

    #[test]
    fn piece_lookup_is_right_continuous_toward_increasing_chi() {
        let g = SplineGrid::bearing(7).unwrap();
        for m in 0..6 {
            assert_eq!(g.piece(g.knots()[m]), m);
        }
        assert_eq!(g.piece(1.0), 5);
        assert_eq!(g.piece(-5.0), 0);
        assert_eq!(g.piece(5.0), 5);
    }

    #[test]
    fn initial_bearing_fit_examples() {
        let p = ReshapingParams::initial(7, None).unwrap();
        assert_eq!(p.eval_f(FunctionKind::Bearing, 1.0).unwrap(), 0.0);
        assert!((p.eval_f(FunctionKind::Bearing, -1.0).unwrap() - PI * PI / 2.0).abs() < 1e-12);
        for &z in p.bearing.grid().knots() {
            assert!((p.bearing.value(z) - initial_bearing_target(z)).abs() < 1e-12);
        }
        let mid = (p.bearing.value(0.5) - initial_bearing_target(0.5)).abs();
        assert!(mid < 0.05, "mid-interval error {mid}");
        assert!(p.eval_f(FunctionKind::Bearing, 1.5).is_err());
        assert!(p.eval_f(FunctionKind::Bearing, 1.0 + 1e-12).is_ok());
    }

    #[test]
    fn slope_at_top_matches_finite_difference_of_fitted_spline() {
        let p = ReshapingParams::initial(7, None).unwrap();
        let eps = 1e-6;
        let fd = (p.bearing.value(1.0) - p.bearing.value(1.0 - eps)) / eps;
        let analytic = p.eval_f_prime(FunctionKind::Bearing, 1.0).unwrap();
        assert!((fd - analytic).abs() < 1e-5);
        assert!(analytic <= 0.0);
    }

    #[test]
    fn initial_range_fit_examples() {
        let p = ReshapingParams::initial(7, Some((7, 10.0))).unwrap();
        let r = FunctionKind::Range;
        assert!(p.eval_f(r, 0.0).unwrap().abs() < 1e-12);
        assert!(p.eval_f_prime(r, 0.0).unwrap().abs() < 1e-12);
        let h = 1e-3;
        let fd2 = (p.eval_f(r, 0.3 + h).unwrap() - 2.0 * p.eval_f(r, 0.3).unwrap() + p.eval_f(r, 0.3 - h).unwrap())
            / (h * h);
        assert!((p.eval_f_second(r, 0.0).unwrap() - 1.0).abs() < 1e-9);
        assert!((fd2 - 1.0).abs() < 1e-5);
        // extrapolation continues the end piece, which reproduces q^2/2 exactly
        assert!((p.eval_f(r, 12.0).unwrap() - 72.0).abs() < 1e-9);
    }

    #[test]
    fn second_derivative_convention() {
        let g = SplineGrid::new(3, 0.0, 2.0).unwrap();
        // alpha = (v, s, c_top, c_bottom): the upper piece has a^2 = 1, the lower a^2 = 2
        let s = Spline::new(g, vec![0.0, 0.0, 1.0, 2.0]).unwrap();
        assert_eq!(s.second_derivative(1.0), 2.0);
        assert_eq!(s.second_derivative(0.5), 4.0);
        let single = Spline::new(SplineGrid::new(3, 0.0, 2.0).unwrap(), vec![0.0, 0.0, 0.5, 0.5]).unwrap();
        for x in [0.0, 0.3, 1.0, 2.0] {
            assert_eq!(single.second_derivative(x), 1.0);
        }
    }

    #[test]
    fn c1_continuity_at_interior_knots() {
        let g = SplineGrid::bearing(9).unwrap();
        let s = Spline::new(g.clone(), vec![0.3, -1.2, 0.5, -2.0, 3.3, 0.1, -0.7, 2.2, 1.4, -0.9]).unwrap();
        for m in 1..g.k() - 1 {
            let z = g.knots()[m];
            let [v_below, s_below, c_below] = s.piece_coefficients()[m - 1];
            let [v_above, s_above, c_above] = s.piece_coefficients()[m];
            let dz = z - g.knots()[m + 1];
            let left = (v_below, s_below);
            let right = (v_above + s_above * dz + c_above * dz * dz, s_above + 2.0 * c_above * dz);
            assert!((left.0 - right.0).abs() <= 1e-12);
            assert!((left.1 - right.1).abs() <= 1e-12);
            let _ = c_below;
        }
    }

    #[test]
    fn bearing_constraints() {
        let g = SplineGrid::bearing(7).unwrap();
        let c = build_bearing_constraints(&g, DEFAULT_MARGIN).unwrap();
        let init = Spline::fit(initial_bearing_target, g.clone()).unwrap();
        assert!(c.is_feasible(init.alpha(), 0.0));
        for &z in g.knots()[..6].iter() {
            assert!(init.derivative(z) < 0.0);
        }
        let zero = vec![0.0; 8];
        assert_eq!(c.max_violation(&zero) > 0.0, true);
        assert_eq!(
            c.eq_rows.iter().zip(&c.eq_rhs).all(|(r, b)| r.iter().zip(&zero).map(|(a, x)| a * x).sum::<f64>() == *b),
            true
        );
        let mut all = c.eq_rows.clone();
        all.extend(c.in_rows.iter().cloned());
        assert_eq!(all.len(), 8);
        assert_eq!(rank(&all), 8);
    }

    #[test]
    fn range_constraints() {
        let g = SplineGrid::symmetric(7, 10.0).unwrap();
        let c = build_range_constraints(&g, DEFAULT_MARGIN).unwrap();
        let init = Spline::fit(initial_range_target, g.clone()).unwrap();
        assert!(c.max_violation(init.alpha()) < 1e-12);

        let flipped = Spline::fit(|q| -q * q / 2.0, g.clone()).unwrap();
        assert!(c.max_violation(flipped.alpha()) > 0.5);
        let last = c.in_rows.len();
        let curv_top = c.in_rows[last - 3].iter().zip(flipped.alpha()).map(|(a, b)| a * b).sum::<f64>();
        assert!(curv_top > c.in_rhs[last - 3]);

        let linear = Spline::fit(|q| q, g.clone()).unwrap();
        let fp0: f64 = c.eq_rows[1].iter().zip(linear.alpha()).map(|(a, b)| a * b).sum();
        assert!((fp0 - 1.0).abs() < 1e-9);

        assert!(matches!(
            build_range_constraints(&SplineGrid::symmetric(6, 10.0).unwrap(), 1e-6),
            Err(Error::GridMissingZero)
        ));
    }

    #[test]
    fn json_round_trip_is_bit_stable() {
        let p = ReshapingParams::initial(7, Some((7, 10.0))).unwrap();
        let back = ReshapingParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
        assert!(back.alpha().iter().zip(p.alpha()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let text = serde_json::to_string(&p.bearing.to_doc()).unwrap();
        assert!(text.starts_with(r#"{"grid":{"k":7,"span":[-1.0,1.0]},"alpha":["#));
    }

    #[test]
    fn stacked_params() {
        let p = ReshapingParams::initial(7, Some((5, 4.0))).unwrap();
        assert_eq!(p.num_params(), 8 + 6);
        let a = p.alpha();
        let q = p.with_alpha(&a).unwrap();
        assert_eq!(p, q);
        assert!(p.with_alpha(&a[..3]).is_err());
        let c = p.constraints(1e-6).unwrap();
        assert_eq!(c.dim, 14);
        assert!(c.is_feasible(&a, 1e-12));
    }
}

//! Formations, inter-agent measurements and shape-equivalence predicates.
//!
//! A formation is a graph over `N` agents together with a configuration of
//! their positions in `R^n`. Bearing edges carry unit-vector measurements,
//! range edges (a subset of the bearing edges) additionally carry distances.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Interaction graph with bearing and range edge sets.
///
/// Both edge sets are stored closed under reversal: `(i, j)` present implies
/// `(j, i)` present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormationGraph {
    num_agents: usize,
    bearing_edges: BTreeSet<(usize, usize)>,
    range_edges: BTreeSet<(usize, usize)>,
}

impl FormationGraph {
    /// Builds a graph from one-directional edge lists, closing both to undirected sets.
    pub fn new(
        num_agents: usize,
        bearing_edges: &[(usize, usize)],
        range_edges: &[(usize, usize)],
    ) -> Result<Self> {
        if num_agents == 0 {
            return Err(Error::InvalidFormation("graph needs at least one agent".into()));
        }
        let close = |edges: &[(usize, usize)], what: &str| -> Result<BTreeSet<(usize, usize)>> {
            let mut set = BTreeSet::new();
            for &(i, j) in edges {
                if i == j {
                    return Err(Error::InvalidFormation(format!("self-loop on agent {i} in {what} edges")));
                }
                if i >= num_agents || j >= num_agents {
                    return Err(Error::InvalidFormation(format!(
                        "{what} edge ({i}, {j}) references an agent outside 0..{num_agents}"
                    )));
                }
                set.insert((i, j));
                set.insert((j, i));
            }
            Ok(set)
        };
        let bearing_edges = close(bearing_edges, "bearing")?;
        let range_edges = close(range_edges, "range")?;
        if let Some(&(i, j)) = range_edges.iter().find(|e| !bearing_edges.contains(e)) {
            return Err(Error::InvalidFormation(format!(
                "range edge ({i}, {j}) is not a bearing edge"
            )));
        }
        Ok(Self { num_agents, bearing_edges, range_edges })
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    /// All ordered bearing edges (both directions).
    pub fn bearing_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bearing_edges.iter().copied()
    }

    /// All ordered range edges (both directions).
    pub fn range_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.range_edges.iter().copied()
    }

    /// Bearing edges with `i < j`, in lexicographic order.
    pub fn undirected_bearing_edges(&self) -> Vec<(usize, usize)> {
        self.bearing_edges.iter().copied().filter(|(i, j)| i < j).collect()
    }

    /// Range edges with `i < j`, in lexicographic order.
    pub fn undirected_range_edges(&self) -> Vec<(usize, usize)> {
        self.range_edges.iter().copied().filter(|(i, j)| i < j).collect()
    }

    pub fn has_bearing(&self, i: usize, j: usize) -> bool {
        self.bearing_edges.contains(&(i, j))
    }

    pub fn has_range(&self, i: usize, j: usize) -> bool {
        self.range_edges.contains(&(i, j))
    }

    /// Same bearing topology with a different set of range edges.
    pub fn with_range_edges(&self, range_edges: &[(usize, usize)]) -> Result<Self> {
        Self::new(self.num_agents, &self.undirected_bearing_edges(), range_edges)
    }
}

/// Stacked agent positions in `R^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Configuration {
    dim: usize,
    coords: Vec<f64>,
}

impl Configuration {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("workspace dimension must be positive".into()));
        }
        if coords.is_empty() || coords.len() % dim != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} coordinates cannot be split into points of dimension {dim}",
                coords.len()
            )));
        }
        if let Some(bad) = coords.iter().find(|c| !c.is_finite()) {
            return Err(Error::InvalidConfig(format!("non-finite coordinate {bad}")));
        }
        Ok(Self { dim, coords })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map(Vec::len).unwrap_or(0);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::InvalidConfig("points have mixed dimensions".into()));
        }
        Self::new(dim, points.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_agents(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn agent(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.coords
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.coords.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub fn centroid(&self) -> Vec<f64> {
        let n = self.num_agents() as f64;
        let mut c = vec![0.0; self.dim];
        for p in self.coords.chunks(self.dim) {
            for (ck, pk) in c.iter_mut().zip(p) {
                *ck += pk;
            }
        }
        c.iter_mut().for_each(|v| *v /= n);
        c
    }

    /// `scale * x_i + shift` for every agent.
    pub fn transformed(&self, scale: f64, shift: &[f64]) -> Self {
        let coords = self
            .coords
            .chunks(self.dim)
            .flat_map(|p| p.iter().zip(shift).map(move |(x, t)| scale * x + t))
            .collect();
        Self { dim: self.dim, coords }
    }

    /// Root-mean-square distance of the agents from their centroid.
    pub fn rms_radius(&self) -> f64 {
        let c = self.centroid();
        let sum: f64 = self
            .coords
            .chunks(self.dim)
            .map(|p| p.iter().zip(&c).map(|(x, m)| (x - m).powi(2)).sum::<f64>())
            .sum();
        (sum / self.num_agents() as f64).sqrt()
    }

    /// Largest pairwise distance.
    pub fn diameter(&self) -> f64 {
        let n = self.num_agents();
        let mut best = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                best = best.max(distance(self.agent(i), self.agent(j)));
            }
        }
        best
    }
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (y - x).powi(2)).sum::<f64>().sqrt()
}

/// Range `||x_j - x_i||` of an edge.
pub fn measure_range(config: &Configuration, edge: (usize, usize)) -> Result<f64> {
    let (i, j) = edge;
    let d = distance(config.agent(i), config.agent(j));
    if d == 0.0 {
        return Err(Error::CoincidentAgents(i, j));
    }
    Ok(d)
}

/// Unit bearing from agent `i` toward agent `j`.
pub fn measure_bearing(config: &Configuration, edge: (usize, usize)) -> Result<Vec<f64>> {
    let d = measure_range(config, edge)?;
    let (xi, xj) = (config.agent(edge.0), config.agent(edge.1));
    Ok(xi.iter().zip(xj).map(|(a, b)| (b - a) / d).collect())
}

/// Cosine between the current and desired bearing, clamped to `[-1, 1]`.
pub fn bearing_similarity(beta: &[f64], beta_goal: &[f64]) -> f64 {
    dot(beta, beta_goal).clamp(-1.0, 1.0)
}

/// Goal data of one undirected edge `i < j`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeGoal {
    pub i: usize,
    pub j: usize,
    /// Desired bearing from `i` toward `j`.
    pub bearing: Vec<f64>,
    /// Desired range, present for range edges only.
    pub range: Option<f64>,
}

/// Graph plus desired configuration, with the desired measurements derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct FormationSpec {
    graph: FormationGraph,
    desired: Configuration,
    edges: Vec<EdgeGoal>,
}

impl FormationSpec {
    pub fn new(graph: FormationGraph, desired: Configuration) -> Result<Self> {
        if desired.num_agents() != graph.num_agents() {
            return Err(Error::InvalidFormation(format!(
                "graph has {} agents but desired configuration has {}",
                graph.num_agents(),
                desired.num_agents()
            )));
        }
        let mut edges = Vec::new();
        for (i, j) in graph.undirected_bearing_edges() {
            let bearing = measure_bearing(&desired, (i, j)).map_err(|_| {
                Error::InvalidFormation(format!("desired positions of agents {i} and {j} coincide"))
            })?;
            let range = graph.has_range(i, j).then(|| distance(desired.agent(i), desired.agent(j)));
            edges.push(EdgeGoal { i, j, bearing, range });
        }
        Ok(Self { graph, desired, edges })
    }

    pub fn graph(&self) -> &FormationGraph {
        &self.graph
    }

    pub fn desired(&self) -> &Configuration {
        &self.desired
    }

    pub fn dim(&self) -> usize {
        self.desired.dim()
    }

    pub fn num_agents(&self) -> usize {
        self.graph.num_agents()
    }

    /// Undirected edges `i < j` with their goals, in lexicographic order.
    pub fn edges(&self) -> &[EdgeGoal] {
        &self.edges
    }

    pub fn has_range_edges(&self) -> bool {
        self.edges.iter().any(|e| e.range.is_some())
    }

    /// Desired bearing `beta_g,ij` for an ordered bearing edge.
    pub fn desired_bearing(&self, i: usize, j: usize) -> Option<Vec<f64>> {
        let (a, b, sign) = if i < j { (i, j, 1.0) } else { (j, i, -1.0) };
        self.edges
            .iter()
            .find(|e| e.i == a && e.j == b)
            .map(|e| e.bearing.iter().map(|v| sign * v).collect())
    }

    /// Desired range `d_g,ij` for an ordered range edge.
    pub fn desired_range(&self, i: usize, j: usize) -> Option<f64> {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.edges.iter().find(|e| e.i == a && e.j == b).and_then(|e| e.range)
    }

    /// Same desired shape and bearing graph with a different range edge set.
    pub fn with_range_edges(&self, range_edges: &[(usize, usize)]) -> Result<Self> {
        Self::new(self.graph.with_range_edges(range_edges)?, self.desired.clone())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FormationSpecDoc = serde_json::from_str(text)?;
        doc.try_into()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&FormationSpecDoc::from(self))?)
    }
}

/// On-disk form of a [`FormationSpec`]; edges are listed in one direction only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormationSpecDoc {
    pub n: usize,
    pub agents: usize,
    pub bearing_edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub range_edges: Vec<[usize; 2]>,
    pub desired: Vec<Vec<f64>>,
}

impl TryFrom<FormationSpecDoc> for FormationSpec {
    type Error = Error;

    fn try_from(doc: FormationSpecDoc) -> Result<Self> {
        if doc.desired.len() != doc.agents {
            return Err(Error::InvalidFormation(format!(
                "expected {} desired positions, found {}",
                doc.agents,
                doc.desired.len()
            )));
        }
        if doc.desired.iter().any(|p| p.len() != doc.n) {
            return Err(Error::InvalidFormation(format!("desired positions must have dimension {}", doc.n)));
        }
        let pairs = |v: &[[usize; 2]]| v.iter().map(|e| (e[0], e[1])).collect::<Vec<_>>();
        let graph = FormationGraph::new(doc.agents, &pairs(&doc.bearing_edges), &pairs(&doc.range_edges))?;
        let desired = Configuration::new(doc.n, doc.desired.concat())?;
        FormationSpec::new(graph, desired)
    }
}

impl From<&FormationSpec> for FormationSpecDoc {
    fn from(spec: &FormationSpec) -> Self {
        let g = spec.graph();
        Self {
            n: spec.dim(),
            agents: g.num_agents(),
            bearing_edges: g.undirected_bearing_edges().into_iter().map(|(i, j)| [i, j]).collect(),
            range_edges: g.undirected_range_edges().into_iter().map(|(i, j)| [i, j]).collect(),
            desired: spec.desired().points(),
        }
    }
}

/// Result of fitting `a ~ scale * b + translation`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityFit {
    pub holds: bool,
    pub scale: f64,
    pub translation: Vec<f64>,
    /// Largest per-agent residual `||a_i - (scale * b_i + translation)||`.
    pub max_residual: f64,
}

fn check_same_shape(a: &Configuration, b: &Configuration) -> Result<()> {
    if a.dim() != b.dim() || a.num_agents() != b.num_agents() {
        return Err(Error::InvalidConfig(format!(
            "cannot compare {}x{} and {}x{} configurations",
            a.num_agents(),
            a.dim(),
            b.num_agents(),
            b.dim()
        )));
    }
    Ok(())
}

fn fit_with_scale(a: &Configuration, b: &Configuration, scale: f64, tol: f64) -> SimilarityFit {
    let (ca, cb) = (a.centroid(), b.centroid());
    let translation: Vec<f64> = ca.iter().zip(&cb).map(|(x, y)| x - scale * y).collect();
    let max_residual = (0..a.num_agents())
        .map(|i| {
            let pred: Vec<f64> = b.agent(i).iter().zip(&translation).map(|(x, t)| scale * x + t).collect();
            distance(a.agent(i), &pred)
        })
        .fold(0.0, f64::max);
    SimilarityFit { holds: max_residual <= tol, scale, translation, max_residual }
}

/// Tests whether `a_i = gamma * b_i + t` for some `gamma > 0` and `t`.
///
/// The scale is the ratio of RMS radii about the centroids and the
/// translation maps centroid to centroid.
pub fn is_similar(a: &Configuration, b: &Configuration, tol: f64) -> Result<SimilarityFit> {
    check_same_shape(a, b)?;
    let rb = b.rms_radius();
    if rb == 0.0 {
        return Err(Error::Degenerate("reference configuration has zero spread; scale is unresolvable".into()));
    }
    Ok(fit_with_scale(a, b, a.rms_radius() / rb, tol))
}

/// Tests whether `a_i = b_i + t` for some translation `t`.
pub fn is_congruent(a: &Configuration, b: &Configuration, tol: f64) -> Result<SimilarityFit> {
    check_same_shape(a, b)?;
    Ok(fit_with_scale(a, b, 1.0, tol))
}

//! Desired formations, experiment cases and seeded initial-condition sampling.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formation::{distance, Configuration, FormationGraph, FormationSpec, FormationSpecDoc};

/// Which bearing edges also carry range measurements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Case {
    NoEd,
    OneEd,
    SomeEd,
    FullEd,
}

impl Case {
    pub const ALL: [Case; 4] = [Case::NoEd, Case::OneEd, Case::SomeEd, Case::FullEd];

    /// Default range-edge selection for a graph whose first `n` edges form
    /// the cycle `0-1-...-(n-1)-0`.
    pub fn range_edges(self, graph: &FormationGraph) -> Vec<(usize, usize)> {
        let n = graph.num_agents();
        let all = graph.undirected_bearing_edges();
        match self {
            Case::NoEd => Vec::new(),
            Case::FullEd => all,
            Case::OneEd => all.into_iter().take(1).collect(),
            Case::SomeEd => {
                let mut out: Vec<(usize, usize)> = (0..n)
                    .step_by(2)
                    .map(|k| (k, (k + 1) % n))
                    .filter(|&(a, b)| a != b && graph.has_bearing(a, b))
                    .map(|(a, b)| (a.min(b), a.max(b)))
                    .collect();
                out.sort_unstable();
                out.dedup();
                if out.len() >= all.len() {
                    out.truncate(all.len().saturating_sub(1).max(1));
                }
                out
            }
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Case::NoEd => "NoEd",
            Case::OneEd => "OneEd",
            Case::SomeEd => "SomeEd",
            Case::FullEd => "FullEd",
        };
        f.write_str(s)
    }
}

impl FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Case::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown case '{s}' (expected NoEd, OneEd, SomeEd or FullEd)")))
    }
}

/// Regular polygon of the given circumradius centred at the origin, vertex
/// `k` at angle `2 pi k / n`.
pub fn regular_polygon(n: usize, radius: f64) -> Configuration {
    let coords = (0..n)
        .flat_map(|k| {
            let a = 2.0 * PI * k as f64 / n as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect();
    Configuration::new(2, coords).expect("two-dimensional polygon")
}

/// Cycle over all agents plus a fan of chords from agent 0.
pub fn polygon_graph(n: usize) -> Result<FormationGraph> {
    if n < 2 {
        return Err(Error::InvalidFormation("a formation needs at least two agents".into()));
    }
    let mut edges: Vec<(usize, usize)> = (0..n).map(|k| (k, (k + 1) % n)).filter(|(a, b)| a != b).collect();
    edges.extend((2..n.saturating_sub(1)).map(|k| (0, k)));
    if n == 2 {
        edges.truncate(1);
    }
    FormationGraph::new(n, &edges, &[])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Polygon,
    /// Polygon whose vertex radii are scaled by `1 + amplitude * u`, `u` uniform in `[-1, 1]`.
    PerturbedPolygon { amplitude: f64, seed: u64 },
    Custom { coords: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOptions {
    pub n_agents: usize,
    pub shape: Shape,
    pub radius: f64,
    /// Sampling interval per dimension.
    pub sample_box: Vec<[f64; 2]>,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub max_attempts: usize,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self {
            n_agents: 5,
            shape: Shape::Polygon,
            radius: 1.0,
            sample_box: vec![[-5.0, 5.0]; 2],
            seed: 0,
            n_train: 7,
            n_test: 200,
            max_attempts: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    /// Bearing-only formation; cases add range edges on top.
    pub spec: FormationSpec,
    pub ic_train: Vec<Configuration>,
    pub ic_test: Vec<Configuration>,
    pub seed: u64,
    pub sample_box: Vec<[f64; 2]>,
}

impl Scenario {
    pub fn spec_for(&self, case: Case) -> Result<FormationSpec> {
        self.spec.with_range_edges(&case.range_edges(self.spec.graph()))
    }

    /// Smallest connected-pair separation allowed in sampled initial conditions.
    pub fn guard_eps(&self) -> f64 {
        1e-4 * self.spec.desired().diameter()
    }

    pub fn to_doc(&self) -> ScenarioDoc {
        ScenarioDoc {
            spec: FormationSpecDoc::from(&self.spec),
            ic_train: self.ic_train.iter().map(Configuration::points).collect(),
            ic_test: self.ic_test.iter().map(Configuration::points).collect(),
            seed: self.seed,
            sample_box: self.sample_box.clone(),
        }
    }

    pub fn from_doc(doc: ScenarioDoc) -> Result<Self> {
        let spec = FormationSpec::try_from(doc.spec)?;
        let load = |v: Vec<Vec<Vec<f64>>>| -> Result<Vec<Configuration>> {
            v.iter()
                .map(|pts| {
                    let c = Configuration::from_points(pts)?;
                    if c.num_agents() != spec.num_agents() || c.dim() != spec.dim() {
                        return Err(Error::InvalidConfig("initial condition does not match the formation".into()));
                    }
                    Ok(c)
                })
                .collect()
        };
        Ok(Self {
            ic_train: load(doc.ic_train)?,
            ic_test: load(doc.ic_test)?,
            spec,
            seed: doc.seed,
            sample_box: doc.sample_box,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_doc(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDoc {
    pub spec: FormationSpecDoc,
    pub ic_train: Vec<Vec<Vec<f64>>>,
    pub ic_test: Vec<Vec<Vec<f64>>>,
    pub seed: u64,
    #[serde(rename = "box")]
    pub sample_box: Vec<[f64; 2]>,
}

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;
const SHAPE_STREAM: u64 = 3;

fn desired_shape(opts: &ScenarioOptions) -> Result<Configuration> {
    let n = opts.n_agents;
    match &opts.shape {
        Shape::Polygon => Ok(regular_polygon(n, opts.radius)),
        Shape::PerturbedPolygon { amplitude, seed } => {
            if !(0.0..1.0).contains(amplitude) {
                return Err(Error::InvalidConfig("perturbation amplitude must lie in [0, 1)".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            rng.set_stream(SHAPE_STREAM);
            let base = regular_polygon(n, opts.radius);
            let coords = (0..n)
                .flat_map(|k| {
                    let s = 1.0 + amplitude * rng.random_range(-1.0..=1.0);
                    [base.agent(k)[0] * s, base.agent(k)[1] * s]
                })
                .collect();
            Configuration::new(2, coords)
        }
        Shape::Custom { coords } => {
            let c = Configuration::from_points(coords)?;
            if c.num_agents() != n {
                return Err(Error::InvalidConfig(format!("custom shape has {} agents, expected {n}", c.num_agents())));
            }
            Ok(c)
        }
    }
}

fn sample_ics(
    rng: &mut ChaCha8Rng,
    spec: &FormationSpec,
    sample_box: &[[f64; 2]],
    count: usize,
    guard: f64,
    max_attempts: usize,
) -> Result<Vec<Configuration>> {
    let na = spec.num_agents();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::RejectionExhausted(max_attempts));
            }
            let coords: Vec<f64> =
                (0..na).flat_map(|_| sample_box.iter().map(|&[lo, hi]| rng.random_range(lo..hi)).collect::<Vec<_>>()).collect();
            let x = Configuration::new(sample_box.len(), coords)?;
            if spec.edges().iter().all(|e| distance(x.agent(e.i), x.agent(e.j)) >= guard) {
                out.push(x);
                break;
            }
        }
    }
    Ok(out)
}

/// Builds the desired formation and draws training and test initial
/// conditions uniformly from the box, from separate seeded streams.
pub fn gen_scenario(opts: &ScenarioOptions) -> Result<Scenario> {
    if opts.n_agents < 2 {
        return Err(Error::InvalidConfig("at least two agents are required".into()));
    }
    if opts.sample_box.len() != 2 || opts.sample_box.iter().any(|[lo, hi]| !(hi > lo)) {
        return Err(Error::InvalidConfig("sampling box must be two non-empty intervals".into()));
    }
    if !(opts.radius > 0.0) {
        return Err(Error::InvalidConfig("polygon radius must be positive".into()));
    }
    let desired = desired_shape(opts)?;
    let spec = FormationSpec::new(polygon_graph(opts.n_agents)?, desired)?;
    let guard = 1e-4 * spec.desired().diameter();
    let mut train_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    train_rng.set_stream(TRAIN_STREAM);
    let mut test_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    test_rng.set_stream(TEST_STREAM);
    let ic_train = sample_ics(&mut train_rng, &spec, &opts.sample_box, opts.n_train, guard, opts.max_attempts)?;
    let ic_test = sample_ics(&mut test_rng, &spec, &opts.sample_box, opts.n_test, guard, opts.max_attempts)?;
    Ok(Scenario { spec, ic_train, ic_test, seed: opts.seed, sample_box: opts.sample_box.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formation::measure_bearing;

    #[test]
    fn pentagon_on_unit_circle() {
        let s = gen_scenario(&ScenarioOptions { n_test: 3, ..Default::default() }).unwrap();
        let x = s.spec.desired();
        for k in 0..5 {
            let a = 2.0 * PI * k as f64 / 5.0;
            assert!((x.agent(k)[0] - a.cos()).abs() < 1e-15 && (x.agent(k)[1] - a.sin()).abs() < 1e-15);
        }
        let side = distance(x.agent(0), x.agent(1));
        for k in 0..5 {
            assert!((distance(x.agent(k), x.agent((k + 1) % 5)) - side).abs() < 1e-12);
        }
        assert_eq!(s.spec.graph().undirected_bearing_edges().len(), 7);
        assert_eq!(s.ic_train.len(), 7);
        assert_eq!(s.ic_test.len(), 3);
    }

    #[test]
    fn seeding_is_deterministic_and_streams_differ() {
        let opts = ScenarioOptions { n_test: 10, seed: 42, ..Default::default() };
        let a = gen_scenario(&opts).unwrap();
        let b = gen_scenario(&opts).unwrap();
        assert_eq!(a, b);
        assert!(a.ic_train.iter().all(|x| !a.ic_test.contains(x)));
        let c = gen_scenario(&ScenarioOptions { seed: 43, ..opts }).unwrap();
        assert_ne!(a.ic_train, c.ic_train);
        for x in a.ic_test.iter().chain(&a.ic_train) {
            assert!(x.as_slice().iter().all(|v| (-5.0..5.0).contains(v)));
        }
    }

    #[test]
    fn triangle_bearings_are_120_degrees_apart() {
        let s = gen_scenario(&ScenarioOptions { n_agents: 3, n_test: 1, n_train: 1, ..Default::default() }).unwrap();
        assert_eq!(s.spec.graph().undirected_bearing_edges(), vec![(0, 1), (0, 2), (1, 2)]);
        let x = s.spec.desired();
        let b01 = measure_bearing(x, (0, 1)).unwrap();
        let b12 = measure_bearing(x, (1, 2)).unwrap();
        let b20 = measure_bearing(x, (2, 0)).unwrap();
        for (u, v) in [(&b01, &b12), (&b12, &b20), (&b20, &b01)] {
            let c = u[0] * v[0] + u[1] * v[1];
            assert!((c + 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn case_edge_selections() {
        let g = polygon_graph(5).unwrap();
        assert!(Case::NoEd.range_edges(&g).is_empty());
        assert_eq!(Case::OneEd.range_edges(&g).len(), 1);
        let some = Case::SomeEd.range_edges(&g);
        assert_eq!(some, vec![(0, 1), (0, 4), (2, 3)]);
        assert_eq!(Case::FullEd.range_edges(&g).len(), 7);
        let g3 = polygon_graph(3).unwrap();
        let some3 = Case::SomeEd.range_edges(&g3);
        assert!(!some3.is_empty() && some3.len() < 3);
        assert_eq!("fulled".parse::<Case>().unwrap(), Case::FullEd);
        assert!("half".parse::<Case>().is_err());
    }

    #[test]
    fn perturbed_shape_and_json() {
        let opts = ScenarioOptions {
            shape: Shape::PerturbedPolygon { amplitude: 0.3, seed: 7 },
            n_test: 2,
            n_train: 1,
            ..Default::default()
        };
        let s = gen_scenario(&opts).unwrap();
        let radii: Vec<f64> = (0..5).map(|k| distance(s.spec.desired().agent(k), &[0.0, 0.0])).collect();
        assert!(radii.iter().all(|r| (0.7..=1.3).contains(r)));
        assert!(radii.iter().any(|r| (r - 1.0).abs() > 1e-3));
        let back = Scenario::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejection_exhaustion() {
        let opts = ScenarioOptions { sample_box: vec![[0.0, 1e-9]; 2], max_attempts: 20, ..Default::default() };
        assert!(matches!(gen_scenario(&opts), Err(Error::RejectionExhausted(20))));
    }
}

//! Experiment configuration.
//!
//! A [`SimConfig`] is the TOML-facing description of an experiment; calling
//! [`SimConfig::resolve`] draws the graph and node inputs and checks every
//! model assumption, producing a [`Scenario`] the engine can run.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, SweepSpec};
use crate::digraph::Digraph;
use crate::protocol::{NodeInit, Role, Variant};
use crate::rng::{self, Domain};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomGraph {
    pub n: usize,
    #[serde(default = "default_fraction")]
    pub extra_edge_fraction: f64,
    /// Defaults to a value derived from the top-level seed.
    pub seed: Option<u64>,
}

fn default_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitGraph {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GraphSpec {
    Explicit(ExplicitGraph),
    Random(RandomGraph),
}

impl GraphSpec {
    pub fn as_random_mut(&mut self) -> Option<&mut RandomGraph> {
        match self {
            GraphSpec::Random(r) => Some(r),
            GraphSpec::Explicit(_) => None,
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            GraphSpec::Explicit(e) => e.n,
            GraphSpec::Random(r) => r.n,
        }
    }
}

/// Node inputs drawn uniformly from inclusive ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomNodes {
    /// Range of `l + u`.
    pub tests: [i64; 2],
    /// Range of `lambda`.
    pub infections: [i64; 2],
    /// Range of `u`; clipped to the drawn `l + u`.
    #[serde(default)]
    pub received: [i64; 2],
    #[serde(default)]
    pub private: Vec<usize>,
    #[serde(default)]
    pub curious: Vec<usize>,
    /// Additional private nodes picked at random among the unassigned ones.
    #[serde(default)]
    pub private_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitNodes {
    pub list: Vec<NodeInit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeSpec {
    Explicit(ExplicitNodes),
    Random(RandomNodes),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    /// Nodes to attack; defaults to every node whose neighbourhood is curious
    /// (inference) or every private node (feasible set).
    #[serde(default)]
    pub targets: Vec<usize>,
    /// Second observation round for the linear-system attack; defaults to the
    /// first round with a different observed numerator.
    pub round: Option<u64>,
    /// Enumeration bound; defaults to four times the largest true value.
    pub bound: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    #[serde(default = "half")]
    pub eps1: f64,
    #[serde(default = "half")]
    pub eps2: f64,
    #[serde(default)]
    pub window: analysis::TauWindow,
}

fn half() -> f64 {
    0.5
}

impl Default for BoundsSpec {
    fn default() -> Self {
        Self { eps1: 0.5, eps2: 0.5, window: analysis::TauWindow::NodesMinusOne }
    }
}

/// TOML experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub seed: u64,
    /// Hard iteration cap; defaults to `10 * D * n * (y_init + n)`.
    pub cap: Option<u64>,
    /// Window length `D` (an upper bound on the diameter); defaults to the diameter.
    pub window: Option<usize>,
    /// Rounds between snapshots; defaults to 1 up to 200 nodes, else 10.
    pub snapshot_stride: Option<u64>,
    /// Keep relaying max/min values after stopping.
    #[serde(default)]
    pub relay_after_flag: bool,
    pub graph: GraphSpec,
    pub nodes: NodeSpec,
    pub sweep: Option<SweepSpec>,
    pub attack: Option<AttackSpec>,
    pub bounds: Option<BoundsSpec>,
}

impl SimConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, Error> {
        Ok(toml::from_str(s)?)
    }

    pub fn to_toml_string(&self) -> Result<String, Error> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces the root seed and lets the graph seed follow it.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        if let GraphSpec::Random(r) = &mut self.graph {
            r.seed = None;
        }
    }

    /// Draws the graph and node inputs and validates every assumption.
    /// All violations are reported together.
    pub fn resolve(&self) -> Result<Scenario, Error> {
        let mut violations = Vec::new();
        let graph = match &self.graph {
            GraphSpec::Explicit(e) => {
                let edges: Vec<_> = e.edges.iter().map(|&[a, b]| (a, b)).collect();
                Digraph::from_edges(e.n, &edges)
            }
            GraphSpec::Random(r) => {
                let seed = r.seed.unwrap_or_else(|| rng::derive_seed(self.seed, Domain::Graph, &[]));
                Digraph::generate_strongly_connected(r.n, r.extra_edge_fraction, seed)
            }
        };
        let graph = match graph {
            Ok(g) => Some(g),
            Err(e) => {
                violations.push(format!("Assumption 1 (strongly connected digraph): {e}"));
                None
            }
        };
        let n = self.graph.node_count();
        let inits = match &self.nodes {
            NodeSpec::Explicit(e) => {
                if e.list.len() != n {
                    violations.push(format!("node list has {} entries but the graph has {n} nodes", e.list.len()));
                }
                e.list.clone()
            }
            NodeSpec::Random(r) => self.draw_nodes(r, n, &mut violations),
        };

        for (j, init) in inits.iter().enumerate() {
            if init.infections < 1 {
                violations.push(format!(
                    "Assumption 3 (tests >= infections >= 1): node {j} has infections = {}",
                    init.infections
                ));
            } else if init.tests() < init.infections {
                violations.push(format!(
                    "Assumption 3 (tests >= infections >= 1): node {j} has tests = {} < infections = {}",
                    init.tests(),
                    init.infections
                ));
            }
            if init.stored < 0 || init.received < 0 {
                violations.push(format!("node {j} has a negative test count"));
            }
        }
        if self.variant == Variant::Alg1 && !inits.is_empty() && inits.iter().all(|i| i.infections <= 1) {
            violations.push(
                "infections must be strictly greater than 1 for at least one node: \
                 with every node holding one token no node can ever transmit"
                    .into(),
            );
        }

        let Some(graph) = graph else {
            return Err(Error::Validation(violations));
        };
        let window = self.window.unwrap_or(graph.diameter());
        if window < graph.diameter() || window == 0 {
            violations.push(format!(
                "Assumption 2 (window >= diameter): window {window} is below the diameter {}",
                graph.diameter()
            ));
        }
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        let cap = self.cap.unwrap_or_else(|| default_cap(window, &inits));
        let snapshot_stride = self.snapshot_stride.unwrap_or(if n <= 200 { 1 } else { 10 });
        Ok(Scenario {
            graph,
            inits,
            window,
            variant: self.variant,
            seed: self.seed,
            cap,
            snapshot_stride,
            relay_after_flag: self.relay_after_flag,
        })
    }

    fn draw_nodes(&self, r: &RandomNodes, n: usize, violations: &mut Vec<String>) -> Vec<NodeInit> {
        for (name, [lo, hi]) in [("tests", r.tests), ("infections", r.infections), ("received", r.received)] {
            if lo > hi {
                violations.push(format!("{name} range [{lo}, {hi}] is empty"));
                return Vec::new();
            }
        }
        let mut rng = rng::stream(self.seed, Domain::Scenario, &[n as u64]);
        let mut inits: Vec<NodeInit> = (0..n)
            .map(|_| {
                let tests = rng.gen_range(r.tests[0]..=r.tests[1]);
                let infections = rng.gen_range(r.infections[0]..=r.infections[1]);
                let received = rng.gen_range(r.received[0]..=r.received[1]).clamp(0, tests.max(0));
                NodeInit::new(tests - received, received, infections, Role::Neutral)
            })
            .collect();

        let private: BTreeSet<usize> = r.private.iter().copied().collect();
        let curious: BTreeSet<usize> = r.curious.iter().copied().collect();
        for &j in private.iter().chain(&curious) {
            if j >= n {
                violations.push(format!("role assigned to node {j}, but the graph has {n} nodes"));
            }
        }
        for j in private.intersection(&curious) {
            violations.push(format!("node {j} is listed as both private and curious"));
        }
        for &j in private.iter().filter(|&&j| j < n) {
            inits[j].role = Role::Private;
        }
        for &j in curious.iter().filter(|&&j| j < n) {
            if inits[j].role == Role::Neutral {
                inits[j].role = Role::Curious;
            }
        }
        if r.private_count > 0 {
            let free: Vec<usize> = (0..n).filter(|&j| inits[j].role == Role::Neutral).collect();
            if r.private_count > free.len() {
                violations.push(format!(
                    "private_count {} exceeds the {} unassigned nodes",
                    r.private_count,
                    free.len()
                ));
            } else {
                for i in sample(&mut rng, free.len(), r.private_count) {
                    inits[free[i]].role = Role::Private;
                }
            }
        }
        inits
    }
}

/// `10 * D * n * (y_init + n)`, saturating.
pub fn default_cap(window: usize, inits: &[NodeInit]) -> u64 {
    let n = inits.len() as u64;
    let y_init = analysis::global_ratio(inits)
        .map(|q| {
            let masses: Vec<_> = inits.iter().map(|i| (i.tests(), i.infections)).collect();
            analysis::y_init_potential(&masses, q)
        })
        .unwrap_or(0)
        .max(0) as u64;
    10u64
        .saturating_mul(window.max(1) as u64)
        .saturating_mul(n)
        .saturating_mul(y_init.saturating_add(n))
}

/// A fully resolved, validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub graph: Digraph,
    pub inits: Vec<NodeInit>,
    /// Window length `D` of the max/min stopping protocol.
    pub window: usize,
    pub variant: Variant,
    pub seed: u64,
    pub cap: u64,
    pub snapshot_stride: u64,
    pub relay_after_flag: bool,
}

impl Scenario {
    pub fn n(&self) -> usize {
        self.graph.node_count()
    }

    pub fn roles(&self) -> impl Iterator<Item = Role> + '_ {
        self.inits.iter().map(|i| i.role)
    }

    pub fn private_nodes(&self) -> Vec<usize> {
        (0..self.n()).filter(|&j| self.inits[j].role == Role::Private).collect()
    }

    /// Whether node `j` runs the offset protocol.
    pub fn runs_privacy(&self, j: usize) -> bool {
        self.variant == Variant::Alg2 && self.inits[j].role == Role::Private
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }

    /// The plain protocol on doubled inputs with no private nodes. Given the
    /// same seed it follows the doubled-mass protocol's trajectory exactly.
    pub fn no_privacy_baseline(&self) -> Self {
        let inits = self
            .inits
            .iter()
            .map(|i| NodeInit {
                stored: 2 * i.stored,
                received: 2 * i.received,
                infections: 2 * i.infections,
                role: if i.role == Role::Private { Role::Neutral } else { i.role },
            })
            .collect();
        Self { inits, variant: Variant::Alg1, ..self.clone() }
    }

    /// Same scenario with every private node demoted to neutral.
    pub fn without_private_nodes(&self) -> Self {
        let mut s = self.clone();
        for i in &mut s.inits {
            if i.role == Role::Private {
                i.role = Role::Neutral;
            }
        }
        s
    }
}

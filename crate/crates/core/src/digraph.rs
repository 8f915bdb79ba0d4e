//! Directed communication graphs.
//!
//! Nodes are dense indices `0..n`. Self-loops are never stored; the
//! protocol layer treats "send to myself" as an implicit extra choice.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::rng::{self, Domain};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("invalid graph parameter: {0}")]
    InvalidParameter(String),
    #[error("edge {from}->{to} references a node outside 0..{n}")]
    NodeOutOfRange { from: usize, to: usize, n: usize },
    #[error("node {to} is unreachable from node {from}; graph is not strongly connected")]
    Unreachable { from: usize, to: usize },
}

/// A simple strongly connected digraph with cached neighbour lists and diameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Digraph {
    n: usize,
    out_neighbors: Vec<Vec<usize>>,
    in_neighbors: Vec<Vec<usize>>,
    diameter: usize,
}

impl Digraph {
    /// Builds a digraph from an edge list. Duplicate edges and self-loops are
    /// dropped. Fails unless the result is strongly connected.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if n < 2 {
            return Err(GraphError::InvalidParameter(format!("n must be >= 2, got {n}")));
        }
        let mut set = BTreeSet::new();
        for &(from, to) in edges {
            if from >= n || to >= n {
                return Err(GraphError::NodeOutOfRange { from, to, n });
            }
            if from != to {
                set.insert((from, to));
            }
        }
        let mut out_neighbors = vec![Vec::new(); n];
        let mut in_neighbors = vec![Vec::new(); n];
        // BTreeSet iteration gives sorted neighbour lists.
        for &(from, to) in &set {
            out_neighbors[from].push(to);
            in_neighbors[to].push(from);
        }
        let diameter = compute_diameter(&out_neighbors)?;
        Ok(Self { n, out_neighbors, in_neighbors, diameter })
    }

    /// Random strongly connected digraph: a directed Hamiltonian cycle over a
    /// seeded permutation plus `round(fraction * n * (n - 1))` extra distinct
    /// random edges (capped at the number of remaining pairs).
    pub fn generate_strongly_connected(
        n: usize,
        extra_edge_fraction: f64,
        seed: u64,
    ) -> Result<Self, GraphError> {
        if n < 2 {
            return Err(GraphError::InvalidParameter(format!("n must be >= 2, got {n}")));
        }
        if !(0.0..=1.0).contains(&extra_edge_fraction) {
            return Err(GraphError::InvalidParameter(format!(
                "extra_edge_fraction must lie in [0, 1], got {extra_edge_fraction}"
            )));
        }
        let mut rng = rng::stream(seed, Domain::Graph, &[n as u64, extra_edge_fraction.to_bits()]);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);

        let mut in_cycle = vec![false; n * n];
        let mut edges = Vec::with_capacity(n);
        for i in 0..n {
            let (a, b) = (perm[i], perm[(i + 1) % n]);
            if !in_cycle[a * n + b] {
                in_cycle[a * n + b] = true;
                edges.push((a, b));
            }
        }

        let mut candidates: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (0..n).map(move |b| (a, b)))
            .filter(|&(a, b)| a != b && !in_cycle[a * n + b])
            .collect();
        let wanted = (extra_edge_fraction * (n * (n - 1)) as f64).round() as usize;
        let extra = wanted.min(candidates.len());
        let (chosen, _) = candidates.partial_shuffle(&mut rng, extra);
        edges.extend_from_slice(chosen);

        Self::from_edges(n, &edges)
    }

    pub fn complete(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (0..n)
            .flat_map(|a| (0..n).map(move |b| (a, b)))
            .filter(|(a, b)| a != b)
            .collect();
        Self::from_edges(n, &edges)
    }

    /// Directed cycle 0 -> 1 -> ... -> n-1 -> 0.
    pub fn cycle(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Self::from_edges(n, &edges)
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn out_neighbors(&self, node: usize) -> &[usize] {
        &self.out_neighbors[node]
    }

    pub fn in_neighbors(&self, node: usize) -> &[usize] {
        &self.in_neighbors[node]
    }

    pub fn out_degree(&self, node: usize) -> usize {
        self.out_neighbors[node].len()
    }

    pub fn max_out_degree(&self) -> usize {
        self.out_neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn diameter(&self) -> usize {
        self.diameter
    }

    pub fn edge_count(&self) -> usize {
        self.out_neighbors.iter().map(Vec::len).sum()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.out_neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, outs)| outs.iter().map(move |&b| (a, b)))
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.out_neighbors[from].binary_search(&to).is_ok()
    }

    /// Adjacency dump, one line per node: `j: l1 l2 ...`.
    pub fn to_adjacency_text(&self) -> String {
        let mut s = String::new();
        for (j, outs) in self.out_neighbors.iter().enumerate() {
            let _ = write!(s, "{j}:");
            for l in outs {
                let _ = write!(s, " {l}");
            }
            s.push('\n');
        }
        s
    }
}

/// Exact diameter by BFS from every node.
pub fn compute_diameter(out_neighbors: &[Vec<usize>]) -> Result<usize, GraphError> {
    let n = out_neighbors.len();
    let mut diameter = 0;
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::with_capacity(n);
    for source in 0..n {
        dist.iter_mut().for_each(|d| *d = usize::MAX);
        dist[source] = 0;
        queue.clear();
        queue.push_back(source);
        while let Some(v) = queue.pop_front() {
            for &w in &out_neighbors[v] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        for (target, &d) in dist.iter().enumerate() {
            if d == usize::MAX {
                return Err(GraphError::Unreachable { from: source, to: target });
            }
            diameter = diameter.max(d);
        }
    }
    Ok(diameter)
}

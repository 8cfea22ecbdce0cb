//! Weighted undirected networks, their shortest-path metrics, and seeded
//! random generators used as experiment inputs.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rational::{self, Rational};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph has no nodes")]
    Empty,
    #[error("graph is disconnected: node {0} unreachable from node 0")]
    Disconnected(usize),
    #[error("edge ({u}, {v}) has non-positive weight {w}")]
    NonPositiveWeight { u: usize, v: usize, w: String },
    #[error("edge ({0}, {0}) is a self-loop")]
    SelfLoop(usize),
    #[error("edge ({u}, {v}) references a node outside 0..{n}")]
    NodeOutOfRange { u: usize, v: usize, n: usize },
    #[error("metric entry ({u}, {v}) breaks {what}")]
    BadMetric { u: usize, v: usize, what: &'static str },
    #[error("malformed graph json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightedGraph {
    n: usize,
    edges: Vec<(usize, usize, Rational)>,
}

impl WeightedGraph {
    /// Validates structure (node range, no self-loops, positive weights).
    /// Connectivity is checked separately by [`WeightedGraph::check_connected`].
    pub fn new(n: usize, edges: Vec<(usize, usize, Rational)>) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        for &(u, v, w) in &edges {
            if u >= n || v >= n {
                return Err(GraphError::NodeOutOfRange { u, v, n });
            }
            if u == v {
                return Err(GraphError::SelfLoop(u));
            }
            if !rational::is_positive(&w) {
                return Err(GraphError::NonPositiveWeight { u, v, w: rational::display(&w) });
            }
        }
        Ok(WeightedGraph { n, edges })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize, Rational)] {
        &self.edges
    }

    fn adjacency(&self) -> Vec<Vec<(usize, Rational)>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(u, v, w) in &self.edges {
            adj[u].push((v, w));
            adj[v].push((u, w));
        }
        adj
    }

    pub fn check_connected(&self) -> Result<(), GraphError> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(v) => Err(GraphError::Disconnected(v)),
            None => Ok(()),
        }
    }

    pub fn min_weight(&self) -> Option<Rational> {
        self.edges.iter().map(|e| e.2).min()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let edges: Vec<[i128; 4]> = self
            .edges
            .iter()
            .map(|&(u, v, w)| [u as i128, v as i128, *w.numer(), *w.denom()])
            .collect();
        serde_json::json!({ "n": self.n, "edges": edges })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, GraphError> {
        #[derive(Deserialize)]
        struct Raw {
            n: usize,
            edges: Vec<[i128; 4]>,
        }
        let raw: Raw =
            serde_json::from_value(value.clone()).map_err(|e| GraphError::Json(e.to_string()))?;
        let mut edges = Vec::with_capacity(raw.edges.len());
        for [u, v, num, den] in raw.edges {
            if u < 0 || v < 0 {
                return Err(GraphError::Json(format!("negative node id in edge ({u}, {v})")));
            }
            let w = rational::from_pair(num, den).map_err(GraphError::Json)?;
            edges.push((u as usize, v as usize, w));
        }
        WeightedGraph::new(raw.n, edges)
    }
}

/// Scales every weight by `1 / min-weight` so the lightest edge weighs 1.
pub fn normalize_weights(g: &WeightedGraph) -> Result<WeightedGraph, GraphError> {
    g.check_connected()?;
    let Some(min) = g.min_weight() else {
        return Ok(g.clone());
    };
    let edges = g.edges.iter().map(|&(u, v, w)| (u, v, w / min)).collect();
    WeightedGraph::new(g.n, edges)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metric {
    dist: Vec<Vec<Rational>>,
}

impl Metric {
    /// Validates a distance matrix: zero diagonal, symmetry, off-diagonal
    /// entries at least 1 and the triangle inequality.
    pub fn from_matrix(dist: Vec<Vec<Rational>>) -> Result<Self, GraphError> {
        let n = dist.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        for (u, row) in dist.iter().enumerate() {
            if row.len() != n {
                return Err(GraphError::BadMetric { u, v: row.len(), what: "squareness" });
            }
            for v in 0..n {
                if u == v && !row[v].numer().eq(&0) {
                    return Err(GraphError::BadMetric { u, v, what: "zero diagonal" });
                }
                if row[v] != dist[v][u] {
                    return Err(GraphError::BadMetric { u, v, what: "symmetry" });
                }
                if u != v && row[v] < rational::one() {
                    return Err(GraphError::BadMetric { u, v, what: "minimum distance 1" });
                }
            }
        }
        let m = Metric { dist };
        if let Some((u, v)) = m.triangle_violation() {
            return Err(GraphError::BadMetric { u, v, what: "triangle inequality" });
        }
        Ok(m)
    }

    /// Every pair at distance 1.
    pub fn uniform(n: usize) -> Self {
        let dist = (0..n)
            .map(|u| (0..n).map(|v| if u == v { rational::zero() } else { rational::one() }).collect())
            .collect();
        Metric { dist }
    }

    pub fn size(&self) -> usize {
        self.dist.len()
    }

    pub fn dist(&self, u: usize, v: usize) -> Rational {
        self.dist[u][v]
    }

    pub fn diameter(&self) -> Rational {
        self.dist.iter().flatten().copied().max().unwrap_or_else(rational::zero)
    }

    /// First pair `(u, w)` with `d(u, w) > d(u, v) + d(v, w)` for some `v`.
    pub fn triangle_violation(&self) -> Option<(usize, usize)> {
        let n = self.size();
        for u in 0..n {
            for v in 0..n {
                for w in 0..n {
                    if self.dist[u][w] > self.dist[u][v] + self.dist[v][w] {
                        return Some((u, w));
                    }
                }
            }
        }
        None
    }
}

/// All-pairs shortest paths by one Dijkstra run per source.
pub fn metric_closure(g: &WeightedGraph) -> Metric {
    let adj = g.adjacency();
    let dist = (0..g.n).map(|s| dijkstra(&adj, s)).collect();
    Metric { dist }
}

fn dijkstra(adj: &[Vec<(usize, Rational)>], source: usize) -> Vec<Rational> {
    let mut best: Vec<Option<Rational>> = vec![None; adj.len()];
    let mut heap = BinaryHeap::new();
    best[source] = Some(rational::zero());
    heap.push(Reverse((rational::zero(), source)));
    while let Some(Reverse((d, u))) = heap.pop() {
        if best[u].is_some_and(|b| d > b) {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if best[v].is_none_or(|b| nd < b) {
                best[v] = Some(nd);
                heap.push(Reverse((nd, v)));
            }
        }
    }
    // unreachable nodes cannot occur for connected inputs
    best.into_iter().map(|d| d.expect("graph must be connected")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphModel {
    /// Complete graph with unit weights.
    CompleteUniform,
    /// G(n, p) with integer weights drawn uniformly from `1..=max_weight`.
    ErdosRenyi {
        #[serde(with = "rational::pair")]
        p: Rational,
        max_weight: u32,
    },
}

/// Deterministic for a fixed `(n, model, seed)`; always connected and normalized.
pub fn random_graph(n: usize, model: &GraphModel, seed: u64) -> WeightedGraph {
    assert!(n >= 1, "random_graph needs at least one node");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    match model {
        GraphModel::CompleteUniform => {
            for u in 0..n {
                for v in u + 1..n {
                    edges.push((u, v, rational::one()));
                }
            }
        }
        GraphModel::ErdosRenyi { p, max_weight } => {
            let (num, den) = (*p.numer(), *p.denom());
            assert!(0 <= num && num <= den, "edge probability must lie in [0, 1]");
            let max_weight = (*max_weight).max(1);
            let mut present = BTreeSet::new();
            for u in 0..n {
                for v in u + 1..n {
                    if rng.gen_range(0..den) < num {
                        present.insert((u, v));
                        edges.push((u, v, rational::int(rng.gen_range(1..=max_weight) as i128)));
                    }
                }
            }
            let g = WeightedGraph { n, edges: edges.clone() };
            if g.check_connected().is_err() {
                for (u, v) in random_spanning_tree(n, &mut rng) {
                    let key = (u.min(v), u.max(v));
                    if present.insert(key) {
                        edges.push((key.0, key.1, rational::int(rng.gen_range(1..=max_weight) as i128)));
                    }
                }
            }
        }
    }
    let g = WeightedGraph { n, edges };
    normalize_weights(&g).expect("generated graph is connected with positive weights")
}

/// Uniformly random labelled tree via a random Prüfer sequence.
fn random_spanning_tree(n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    match n {
        0 | 1 => return Vec::new(),
        2 => return vec![(0, 1)],
        _ => {}
    }
    let prufer: Vec<usize> = (0..n - 2).map(|_| rng.gen_range(0..n)).collect();
    let mut degree = vec![1usize; n];
    for &x in &prufer {
        degree[x] += 1;
    }
    let mut leaves: BTreeSet<usize> = (0..n).filter(|&v| degree[v] == 1).collect();
    let mut edges = Vec::with_capacity(n - 1);
    for &x in &prufer {
        let leaf = *leaves.iter().next().expect("prufer decoding always has a leaf");
        leaves.remove(&leaf);
        edges.push((leaf, x));
        degree[x] -= 1;
        if degree[x] == 1 {
            leaves.insert(x);
        }
    }
    let rest: Vec<usize> = leaves.into_iter().collect();
    edges.push((rest[0], rest[1]));
    edges.shuffle(rng);
    edges
}

//! Authority-ascent clustering on a weighted k-nearest-neighbour graph.
//!
//! Every example becomes a node with out-edges to its `k` nearest
//! neighbours. A damped random walk over those edges gives a stationary
//! distribution `ω`; each node then repeatedly moves to the relevant
//! neighbour with the steepest transition-weighted increase of `ω` until it
//! reaches a node where no such increase exists (an authority mode). Nodes
//! that end at the same mode share a pseudo-label.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureMatrix, LabelVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub target: usize,
    /// Non-negative affinity between the endpoints.
    pub affinity: f64,
    /// Transition probability `P_ij`.
    pub prob: f64,
}

/// Directed weighted graph plus its random-walk quantities.
#[derive(Debug, Clone)]
pub struct GraphModel {
    neighbors: Vec<Vec<Edge>>,
    out_degree: Vec<f64>,
    omega: Option<Vec<f64>>,
}

impl GraphModel {
    /// Builds a graph from per-node `(target, affinity)` lists.
    ///
    /// Transition rows are affinities normalised by the weighted out-degree.
    /// A node whose affinities all vanish gets a uniform row over its
    /// out-edges so that the walk stays stochastic.
    pub fn from_adjacency(adjacency: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = adjacency.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut neighbors = Vec::with_capacity(n);
        let mut out_degree = Vec::with_capacity(n);
        for (i, row) in adjacency.into_iter().enumerate() {
            if row.is_empty() {
                return Err(Error::Parameter(format!("node {i} has no out-edges")));
            }
            for &(j, a) in &row {
                if j >= n {
                    return Err(Error::Parameter(format!(
                        "edge {i}->{j} points outside the graph"
                    )));
                }
                if !(a >= 0.0 && a.is_finite()) {
                    return Err(Error::Parameter(format!(
                        "edge {i}->{j} has invalid affinity {a}"
                    )));
                }
            }
            let deg: f64 = row.iter().map(|&(_, a)| a).sum();
            let uniform = 1.0 / row.len() as f64;
            let edges = row
                .into_iter()
                .map(|(target, affinity)| Edge {
                    target,
                    affinity,
                    prob: if deg > 0.0 { affinity / deg } else { uniform },
                })
                .collect();
            neighbors.push(edges);
            out_degree.push(deg);
        }
        Ok(Self {
            neighbors,
            out_degree,
            omega: None,
        })
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn edges(&self, i: usize) -> &[Edge] {
        &self.neighbors[i]
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Weighted out-degree `d_i`.
    pub fn out_degree(&self, i: usize) -> f64 {
        self.out_degree[i]
    }

    pub fn transition(&self, i: usize, j: usize) -> f64 {
        self.neighbors[i]
            .iter()
            .find(|e| e.target == j)
            .map_or(0.0, |e| e.prob)
    }

    /// Stationary distribution, once attached.
    pub fn omega(&self) -> Option<&[f64]> {
        self.omega.as_deref()
    }

    pub fn set_omega(&mut self, omega: Vec<f64>) -> Result<()> {
        if omega.len() != self.n() {
            return Err(Error::Dimension(format!(
                "omega has {} entries for {} nodes",
                omega.len(),
                self.n()
            )));
        }
        self.omega = Some(omega);
        Ok(())
    }

    pub fn with_omega(mut self, omega: Vec<f64>) -> Result<Self> {
        self.set_omega(omega)?;
        Ok(self)
    }

    fn omega_or_panic(&self) -> &[f64] {
        self.omega
            .as_deref()
            .expect("stationary distribution not computed for this graph")
    }

    /// One sweep of the damped walk: `ω P̂` with `P̂ = (1-δ)P + δ/n 𝟙𝟙ᵀ`.
    pub fn walk_step(&self, omega: &[f64], damping: f64) -> Vec<f64> {
        let n = self.n();
        let mass: f64 = omega.iter().sum();
        let mut next = vec![damping * mass / n as f64; n];
        for (i, edges) in self.neighbors.iter().enumerate() {
            let wi = (1.0 - damping) * omega[i];
            for e in edges {
                next[e.target] += wi * e.prob;
            }
        }
        next
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ClusterConfig {
    /// Neighbour count of the graph.
    pub k: usize,
    /// Relevancy scale `γ`.
    pub gamma: f64,
    /// Relevancy threshold `ε`.
    pub epsilon: f64,
    /// Teleport probability of the random walk.
    pub damping: f64,
    /// L1 tolerance of the stationary distribution.
    pub tol: f64,
    pub max_power_iters: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 50,
            gamma: 100.0,
            epsilon: 0.65,
            damping: 0.01,
            tol: 1e-12,
            max_power_iters: 10_000,
        }
    }
}

impl ClusterConfig {
    /// Lists every out-of-range field.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.k < 1 {
            out.push(format!("k must be >= 1 (got {})", self.k));
        }
        if !(self.gamma > 0.0) {
            out.push(format!("gamma must be > 0 (got {})", self.gamma));
        }
        if !(self.epsilon > 0.0) {
            out.push(format!("epsilon must be > 0 (got {})", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.damping) {
            out.push(format!("damping must be in [0, 1) (got {})", self.damping));
        }
        if !(self.tol > 0.0) {
            out.push(format!("tol must be > 0 (got {})", self.tol));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(p.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    /// Contiguous labels `0..C` in order of first appearance.
    pub labels: LabelVector,
    /// Authority mode reached from each node.
    pub mode_of: Vec<usize>,
    /// Number of ascent moves taken from each node.
    pub ascent_path_len: Vec<usize>,
}

impl ClusterAssignment {
    pub fn num_clusters(&self) -> usize {
        self.labels.as_slice().iter().max().map_or(0, |m| m + 1)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters()];
        for &l in self.labels.as_slice() {
            sizes[l] += 1;
        }
        sizes
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len();
    if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    }
}

/// Exact brute-force k-NN graph with Gaussian affinities.
///
/// Neighbours are ranked by Euclidean distance, ties to the lower index. The
/// kernel width is the median over nodes of the distance to the k-th
/// neighbour; when that median is zero every edge gets affinity 1.
pub fn build_knn_graph(x: &FeatureMatrix, k: usize) -> Result<GraphModel> {
    let n = x.n();
    if k == 0 || k >= n {
        return Err(Error::Parameter(format!(
            "k = {k} must satisfy 1 <= k < n = {n}"
        )));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| x.values().row(i).iter().copied().collect())
        .collect();

    let knn: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, squared_distance(&rows[i], &rows[j])))
                .collect();
            let by_dist = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
            cand.select_nth_unstable_by(k - 1, by_dist);
            cand.truncate(k);
            cand.sort_by(by_dist);
            cand
        })
        .collect();

    let mut kth: Vec<f64> = knn.iter().map(|c| c[k - 1].1.sqrt()).collect();
    let sigma = median(&mut kth);
    let adjacency = if sigma > 0.0 {
        let s2 = sigma * sigma;
        knn.into_iter()
            .map(|c| c.into_iter().map(|(j, d2)| (j, (-d2 / s2).exp())).collect())
            .collect()
    } else {
        log::warn!("median k-NN distance is zero; using unit affinities on all edges");
        knn.into_iter()
            .map(|c| c.into_iter().map(|(j, _)| (j, 1.0)).collect())
            .collect()
    };
    GraphModel::from_adjacency(adjacency)
}

/// Damped power iteration for the stationary distribution.
///
/// Returns the first iterate `ω` with `‖ωP̂ − ω‖₁ ≤ tol`.
pub fn stationary_distribution(
    g: &GraphModel,
    damping: f64,
    tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&damping) {
        return Err(Error::Parameter(format!(
            "damping must be in [0, 1) (got {damping})"
        )));
    }
    let n = g.n();
    let mut omega = vec![1.0 / n as f64; n];
    let mut residual = f64::INFINITY;
    for _ in 0..=max_iters {
        let mut next = g.walk_step(&omega, damping);
        residual = next.iter().zip(&omega).map(|(a, b)| (a - b).abs()).sum();
        if residual <= tol {
            return Ok(omega);
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        omega = next;
    }
    Err(Error::NotConverged {
        iterations: max_iters,
        residual,
    })
}

/// `ψ(i,j) = d_i P_ij exp(−γ (ω_j − ω_i)²)`, or 0 when there is no edge.
pub fn node_relevancy(g: &GraphModel, i: usize, j: usize, gamma: f64) -> f64 {
    let omega = g.omega_or_panic();
    match g.edges(i).iter().find(|e| e.target == j) {
        Some(e) => edge_relevancy(g, i, e, omega, gamma),
        None => 0.0,
    }
}

fn edge_relevancy(g: &GraphModel, i: usize, e: &Edge, omega: &[f64], gamma: f64) -> f64 {
    let grad = omega[e.target] - omega[i];
    g.out_degree(i) * e.prob * (-gamma * grad * grad).exp()
}

/// Node `i` together with every out-neighbour whose relevancy strictly
/// exceeds `epsilon`, sorted ascending.
pub fn relevant_neighbors(g: &GraphModel, i: usize, epsilon: f64, gamma: f64) -> Vec<usize> {
    let omega = g.omega_or_panic();
    let mut out: Vec<usize> = g
        .edges(i)
        .iter()
        .filter(|e| e.target != i && edge_relevancy(g, i, e, omega, gamma) > epsilon)
        .map(|e| e.target)
        .chain(std::iter::once(i))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Relevant neighbour maximising `P_ij (ω_j − ω_i)`, lowest index on ties.
/// `None` marks `i` as an authority mode.
pub fn authority_ascent_step(g: &GraphModel, i: usize, epsilon: f64, gamma: f64) -> Option<usize> {
    let omega = g.omega_or_panic();
    let mut best: Option<(usize, f64)> = None;
    for e in g.edges(i) {
        if e.target == i || edge_relevancy(g, i, e, omega, gamma) <= epsilon {
            continue;
        }
        let gain = e.prob * (omega[e.target] - omega[i]);
        let better = match best {
            None => true,
            Some((bj, bg)) => gain > bg || (gain == bg && e.target < bj),
        };
        if better {
            best = Some((e.target, gain));
        }
    }
    best.filter(|&(_, gain)| gain > 0.0).map(|(j, _)| j)
}

/// Runs authority ascent from every node of a graph whose `ω` is attached.
pub fn cluster_graph(g: &GraphModel, epsilon: f64, gamma: f64) -> ClusterAssignment {
    let n = g.n();
    let step: Vec<Option<usize>> = (0..n)
        .into_par_iter()
        .map(|i| authority_ascent_step(g, i, epsilon, gamma))
        .collect();

    let mut mode_of = vec![usize::MAX; n];
    let mut path_len = vec![0usize; n];
    let mut path = Vec::new();
    for start in 0..n {
        if mode_of[start] != usize::MAX {
            continue;
        }
        path.clear();
        let mut cur = start;
        // ω strictly increases along ascent moves, so this walk is acyclic.
        let (mode, base_len) = loop {
            if mode_of[cur] != usize::MAX {
                break (mode_of[cur], path_len[cur]);
            }
            match step[cur] {
                Some(next) => {
                    path.push(cur);
                    cur = next;
                }
                None => {
                    mode_of[cur] = cur;
                    path_len[cur] = 0;
                    break (cur, 0);
                }
            }
        };
        for (depth, &node) in path.iter().rev().enumerate() {
            mode_of[node] = mode;
            path_len[node] = base_len + depth + 1;
        }
    }

    let mut label_of_mode = vec![usize::MAX; n];
    let mut next_label = 0;
    let labels = mode_of
        .iter()
        .map(|&m| {
            if label_of_mode[m] == usize::MAX {
                label_of_mode[m] = next_label;
                next_label += 1;
            }
            label_of_mode[m]
        })
        .collect();

    ClusterAssignment {
        labels: LabelVector::new(labels),
        mode_of,
        ascent_path_len: path_len,
    }
}

/// Builds the graph, computes `ω` and runs authority ascent.
pub fn cluster(x: &FeatureMatrix, cfg: &ClusterConfig) -> Result<ClusterAssignment> {
    cfg.validate()?;
    if x.n() < 2 {
        return Err(Error::TooFewExamples { needed: 2, got: x.n() });
    }
    let mut g = build_knn_graph(x, cfg.k)?;
    let omega = stationary_distribution(&g, cfg.damping, cfg.tol, cfg.max_power_iters)?;
    g.set_omega(omega)?;
    Ok(cluster_graph(&g, cfg.epsilon, cfg.gamma))
}

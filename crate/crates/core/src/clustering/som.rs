//! Federated self-organizing map.
//!
//! Clients compute a Kohonen update and a similarity score against the map
//! they received; the server keeps only best-scoring updates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// How the server picks which client updates to apply in a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SomSelection {
    /// Every node that is some client's BMU receives the full update of its
    /// best-scoring member. Updates of different winners are summed.
    #[default]
    BestPerNode,
    /// Only the single best-scoring client's update is applied.
    GlobalBest,
}

/// Shape of the per-node update inside a client report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SomNeighborhood {
    /// Gaussian neighbourhood around the BMU on the grid.
    #[default]
    Gaussian,
    /// Every node moves with weight 1.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SomConfig {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    /// Initial learning rate.
    pub lr0: f64,
    /// Initial neighbourhood radius; `None` means half the grid diagonal.
    pub radius0: Option<f64>,
    /// Decay constant of both schedules (in rounds).
    pub tau: f64,
    pub selection: SomSelection,
    pub neighborhood: SomNeighborhood,
}

impl SomConfig {
    /// Most-square grid holding `nodes` nodes, schedules decaying over
    /// `total_rounds` with tau = total_rounds / 2.
    pub fn for_nodes(nodes: usize, dim: usize, total_rounds: usize) -> Self {
        let (rows, cols) = most_square_grid(nodes);
        SomConfig {
            rows,
            cols,
            dim,
            lr0: 0.5,
            radius0: None,
            tau: (total_rounds as f64 / 2.0).max(1.0),
            selection: SomSelection::default(),
            neighborhood: SomNeighborhood::default(),
        }
    }
}

/// Factorization `rows x cols = n` with rows >= cols and cols as large as possible.
pub fn most_square_grid(n: usize) -> (usize, usize) {
    let n = n.max(1);
    let mut best = (n, 1);
    let mut c = 1;
    while c * c <= n {
        if n.is_multiple_of(c) {
            best = (n / c, c);
        }
        c += 1;
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoMap {
    config: SomConfig,
    nodes: Vec<Vec<f64>>,
    iteration: usize,
}

/// What a client sends back after seeing the map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SomClientReport {
    pub deltas: Vec<Vec<f64>>,
    /// Negative squared distance to the BMU; higher is better.
    pub score: f64,
    pub bmu: usize,
}

/// Index of the node nearest to `x` in squared Euclidean distance; ties go
/// to the lowest index.
pub fn nearest(nodes: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, n) in nodes.iter().enumerate() {
        let d = sq_dist(n, x);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl SoMap {
    /// Nodes drawn uniformly from `[lo, hi)` per coordinate.
    pub fn new<R: Rng + ?Sized>(config: SomConfig, lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        let n = config.rows * config.cols;
        if n == 0 || config.dim == 0 {
            return Err(FedError::Config(
                "SOM needs at least one node and one dimension".into(),
            ));
        }
        if !(config.lr0 >= 0.0 && config.tau > 0.0) {
            return Err(FedError::Config("SOM lr0 must be >= 0 and tau > 0".into()));
        }
        let nodes = (0..n)
            .map(|_| {
                (0..config.dim)
                    .map(|_| {
                        if hi > lo {
                            rng.random_range(lo..hi)
                        } else {
                            lo
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(SoMap {
            config,
            nodes,
            iteration: 0,
        })
    }

    pub fn from_nodes(config: SomConfig, nodes: Vec<Vec<f64>>) -> Result<Self> {
        if nodes.len() != config.rows * config.cols || nodes.iter().any(|n| n.len() != config.dim) {
            return Err(FedError::Config(
                "SOM node list does not match the grid".into(),
            ));
        }
        Ok(SoMap {
            config,
            nodes,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &SomConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn learning_rate(&self, t: usize) -> f64 {
        self.config.lr0 * (-(t as f64) / self.config.tau).exp()
    }

    pub fn radius0(&self) -> f64 {
        self.config.radius0.unwrap_or_else(|| {
            let r = (self.config.rows - 1) as f64;
            let c = (self.config.cols - 1) as f64;
            (r * r + c * c).sqrt() / 2.0
        })
    }

    pub fn radius(&self, t: usize) -> f64 {
        self.radius0() * (-(t as f64) / self.config.tau).exp()
    }

    fn grid_pos(&self, j: usize) -> (f64, f64) {
        ((j / self.config.cols) as f64, (j % self.config.cols) as f64)
    }

    /// Neighbourhood weight of node `j` around `bmu` at iteration `t`.
    pub fn neighborhood(&self, j: usize, bmu: usize, t: usize) -> f64 {
        if j == bmu || self.config.neighborhood == SomNeighborhood::Uniform {
            return 1.0;
        }
        let (a, b) = self.grid_pos(j);
        let (c, d) = self.grid_pos(bmu);
        let d2 = (a - c).powi(2) + (b - d).powi(2);
        let r = self.radius(t);
        if r <= 0.0 {
            return 0.0;
        }
        (-d2 / (2.0 * r * r)).exp()
    }

    pub fn bmu(&self, x: &[f64]) -> Result<usize> {
        self.check_dim(x)?;
        Ok(nearest(&self.nodes, x))
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.dim {
            return Err(FedError::Usage(format!(
                "SOM has dimension {}, got a vector of length {}",
                self.config.dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// Kohonen update proposed by one client at the current iteration.
    pub fn client_step(&self, x: &[f64]) -> Result<SomClientReport> {
        let bmu = self.bmu(x)?;
        let t = self.iteration;
        let lr = self.learning_rate(t);
        let deltas = self
            .nodes
            .iter()
            .enumerate()
            .map(|(j, w)| {
                let s = lr * self.neighborhood(j, bmu, t);
                w.iter().zip(x).map(|(wi, xi)| s * (xi - wi)).collect()
            })
            .collect();
        Ok(SomClientReport {
            deltas,
            score: -sq_dist(x, &self.nodes[bmu]),
            bmu,
        })
    }

    /// Applies the winning reports (see [`SomSelection`]) and advances the
    /// schedules by one iteration. Report order stands for client id order.
    pub fn server_round(&mut self, reports: &[SomClientReport]) -> Result<()> {
        if reports.is_empty() {
            return Err(FedError::Usage(
                "SOM round needs at least one report".into(),
            ));
        }
        for r in reports {
            if r.deltas.len() != self.nodes.len()
                || r.deltas.iter().any(|d| d.len() != self.config.dim)
                || r.bmu >= self.nodes.len()
            {
                return Err(FedError::Protocol(
                    "SOM report does not match the map".into(),
                ));
            }
        }
        let winners = select_winners(reports, self.nodes.len(), self.config.selection);
        for w in winners {
            for (node, delta) in self.nodes.iter_mut().zip(&reports[w].deltas) {
                for (a, d) in node.iter_mut().zip(delta) {
                    *a += d;
                }
            }
        }
        self.iteration += 1;
        Ok(())
    }

    /// Same result as `client_step` on every point followed by
    /// `server_round`, but only the winners' deltas are computed. Used when
    /// the server itself holds the points.
    pub fn train_round(&mut self, points: &[&[f64]]) -> Result<()> {
        if points.is_empty() {
            return Err(FedError::Usage("SOM round needs at least one point".into()));
        }
        let mut keys = Vec::with_capacity(points.len());
        for x in points {
            let bmu = self.bmu(x)?;
            keys.push((-sq_dist(x, &self.nodes[bmu]), bmu));
        }
        let winners = pick_winners(&keys, self.nodes.len(), self.config.selection);
        let t = self.iteration;
        let lr = self.learning_rate(t);
        let mut total: Vec<Vec<f64>> = vec![vec![0.0; self.config.dim]; self.nodes.len()];
        for w in winners {
            let (x, bmu) = (points[w], keys[w].1);
            for (j, (acc, node)) in total.iter_mut().zip(&self.nodes).enumerate() {
                let s = lr * self.neighborhood(j, bmu, t);
                if s == 0.0 {
                    continue;
                }
                for ((a, wi), xi) in acc.iter_mut().zip(node).zip(x.iter()) {
                    *a += s * (xi - wi);
                }
            }
        }
        for (node, d) in self.nodes.iter_mut().zip(&total) {
            for (a, b) in node.iter_mut().zip(d) {
                *a += b;
            }
        }
        self.iteration += 1;
        Ok(())
    }
}

/// Indices of the reports whose deltas are applied. The best score wins,
/// ties go to the earlier report.
pub fn select_winners(reports: &[SomClientReport], nodes: usize, rule: SomSelection) -> Vec<usize> {
    let keys: Vec<(f64, usize)> = reports.iter().map(|r| (r.score, r.bmu)).collect();
    pick_winners(&keys, nodes, rule)
}

fn pick_winners(keys: &[(f64, usize)], nodes: usize, rule: SomSelection) -> Vec<usize> {
    let better = |i: usize, cur: Option<usize>| match cur {
        None => true,
        Some(c) => keys[i].0 > keys[c].0,
    };
    match rule {
        SomSelection::GlobalBest => {
            let mut best = None;
            for i in 0..keys.len() {
                if better(i, best) {
                    best = Some(i);
                }
            }
            best.into_iter().collect()
        }
        SomSelection::BestPerNode => {
            let mut best: Vec<Option<usize>> = vec![None; nodes];
            for (i, &(_, bmu)) in keys.iter().enumerate() {
                if better(i, best[bmu]) {
                    best[bmu] = Some(i);
                }
            }
            best.into_iter().flatten().collect()
        }
    }
}

/// Fraction of points whose node's majority label matches their own label.
pub fn purity(assignments: &[usize], labels: &[usize]) -> f64 {
    use std::collections::BTreeMap;
    if assignments.is_empty() {
        return 1.0;
    }
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&a, &l) in assignments.iter().zip(labels) {
        *counts.entry(a).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = counts.values().map(|m| *m.values().max().unwrap()).sum();
    majority as f64 / assignments.len() as f64
}

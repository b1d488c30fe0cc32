//! Prototype assignment: a triplet step pulls the personal embedding along
//! the direction from a negative prototype to the positive one, then the
//! user takes the head of the nearest prototype.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::som::nearest;
use crate::error::{FedError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub prototypes: Vec<Vec<f64>>,
    pub margin: f64,
}

/// Per-user signal used to move prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeReport {
    pub assigned: usize,
    pub gradient: Vec<f64>,
}

/// `||u - p||^2 - ||u - n||^2 + margin`.
pub fn triplet_loss(u: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    super::som::sq_dist(u, p) - super::som::sq_dist(u, n) + margin
}

/// Gradient of [`triplet_loss`] with respect to `u`: `2 (n - p)`.
pub fn triplet_grad(p: &[f64], n: &[f64]) -> Vec<f64> {
    p.iter().zip(n).map(|(pi, ni)| 2.0 * (ni - pi)).collect()
}

/// One plain descent step on the triplet loss.
pub fn triplet_update(u: &[f64], p: &[f64], n: &[f64], lr: f64) -> Vec<f64> {
    u.iter()
        .zip(triplet_grad(p, n))
        .map(|(ui, g)| ui - lr * g)
        .collect()
}

impl PrototypeSet {
    pub fn new<R: Rng + ?Sized>(
        count: usize,
        dim: usize,
        margin: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if count < 2 || dim == 0 {
            return Err(FedError::Config(
                "need at least two prototypes of positive dimension".into(),
            ));
        }
        if !(margin > 0.0) {
            return Err(FedError::Config(format!(
                "triplet margin must be positive, got {margin}"
            )));
        }
        let prototypes = (0..count)
            .map(|_| (0..dim).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        Ok(PrototypeSet { prototypes, margin })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    /// Nearest prototype by Euclidean distance, lowest index on ties.
    pub fn assign(&self, u: &[f64]) -> usize {
        nearest(&self.prototypes, u)
    }

    /// Uniform draw among the prototypes other than `positive`.
    pub fn sample_negative<R: Rng + ?Sized>(&self, positive: usize, rng: &mut R) -> usize {
        let j = rng.random_range(0..self.len() - 1);
        if j >= positive {
            j + 1
        } else {
            j
        }
    }

    /// Moves each prototype by `-lr` times the mean gradient of the users
    /// assigned to it. Prototypes nobody reported for stay put.
    pub fn update(&mut self, reports: &[PrototypeReport], lr: f64) -> Result<()> {
        let dim = self.prototypes.first().map_or(0, Vec::len);
        let mut sums = vec![vec![0.0; dim]; self.len()];
        let mut counts = vec![0usize; self.len()];
        for r in reports {
            if r.assigned >= self.len() || r.gradient.len() != dim {
                return Err(FedError::Protocol(
                    "prototype report does not match the set".into(),
                ));
            }
            counts[r.assigned] += 1;
            for (s, g) in sums[r.assigned].iter_mut().zip(&r.gradient) {
                *s += g;
            }
        }
        for ((p, s), &c) in self.prototypes.iter_mut().zip(&sums).zip(&counts) {
            if c > 0 {
                for (pi, si) in p.iter_mut().zip(s) {
                    *pi -= lr * si / c as f64;
                }
            }
        }
        Ok(())
    }
}

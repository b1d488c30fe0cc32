//! Datasets and simulated user populations.
//!
//! Every user belongs to one sub-population `k` and labels a sample positive
//! exactly when its style is `k`. Samples live once in a shared pool; users
//! hold indices into it.

mod mnist;
mod synthetic;

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::nn::Tensor;
use crate::seed::{stream_rng, streams};

pub use mnist::{
    load_mnist_dir, load_mnist_idx, mnist_paths, parse_idx_images, parse_idx_labels, MnistSplit,
};
pub use synthetic::{
    gen_interpolated_dataset, style_mixtures, style_prototypes, Mixture, SyntheticSpec,
};

/// One image and its user-independent style.
#[derive(Debug, Clone, PartialEq)]
pub struct StyledSample {
    pub input: Tensor,
    pub style: usize,
}

/// A pooled sample as seen by one user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    /// Index into the population's sample pool.
    pub index: usize,
    pub style: usize,
    /// 1 when the user views the sample positively.
    pub preference: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserDataset {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserData {
    pub user_id: usize,
    /// Ground-truth sub-population (the preferred style).
    pub subpop: usize,
    pub data: UserDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub subpops: usize,
    pub proportions: Vec<f64>,
    pub users: usize,
    /// Positives (and, separately, negatives) per user in the training split.
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl PopulationSpec {
    pub fn balanced(subpops: usize, users: usize, seed: u64) -> Self {
        PopulationSpec {
            subpops,
            proportions: vec![1.0 / subpops as f64; subpops],
            users,
            train_per_class: 10,
            test_per_class: 5,
            seed,
        }
    }

    /// Named presets: `mnist-balanced`, `mnist-imbalanced`,
    /// `synthetic-balanced`, `synthetic-imbalanced`.
    pub fn preset(name: &str, users: usize, seed: u64) -> Result<Self> {
        let proportions = preset_proportions(name)?;
        Ok(PopulationSpec {
            subpops: proportions.len(),
            proportions,
            ..PopulationSpec::balanced(1, users, seed)
        })
    }

    /// Lists every violated invariant.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.subpops < 2 {
            out.push(format!(
                "population.subpops must be at least 2, got {}",
                self.subpops
            ));
        }
        if self.proportions.len() != self.subpops {
            out.push(format!(
                "population.proportions has {} entries for {} sub-populations",
                self.proportions.len(),
                self.subpops
            ));
        }
        if self
            .proportions
            .iter()
            .any(|p| !(p.is_finite() && *p >= 0.0))
        {
            out.push("population.proportions must be finite and non-negative".into());
        }
        let sum: f64 = self.proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            out.push(format!("population.proportions must sum to 1, got {sum}"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            out.push("population.train_per_class and test_per_class must be positive".into());
        }
        if out.is_empty() {
            let counts = largest_remainder(&self.proportions, self.users);
            if let Some(k) = counts.iter().position(|&c| c == 0) {
                out.push(format!(
                    "population.users = {} leaves sub-population {k} empty",
                    self.users
                ));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(FedError::Config(p.join("; ")))
        }
    }

    pub fn samples_per_user(&self) -> usize {
        2 * (self.train_per_class + self.test_per_class)
    }
}

pub fn preset_proportions(name: &str) -> Result<Vec<f64>> {
    Ok(match name {
        "mnist-balanced" => vec![0.1; 10],
        "mnist-imbalanced" => {
            let mut p = vec![0.25, 0.15];
            p.extend([0.10; 4]);
            p.extend([0.05; 4]);
            p
        }
        "synthetic-balanced" => vec![0.05; 20],
        "synthetic-imbalanced" => {
            let mut p = vec![0.04; 20];
            p[0] = 0.20;
            p[5] = 0.08;
            p
        }
        other => {
            return Err(FedError::Config(format!(
                "unknown population preset '{other}'"
            )))
        }
    })
}

/// Integer counts proportional to `proportions` that sum to `total`.
/// Leftover units go to the largest fractional parts, lowest index first.
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = proportions.iter().sum();
    if proportions.is_empty() || sum <= 0.0 {
        return vec![0; proportions.len()];
    }
    let exact: Vec<f64> = proportions.iter().map(|p| p / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| (x + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    let frac = |i: usize| exact[i] - counts[i] as f64;
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// A population of users over a shared sample pool.
#[derive(Debug, Clone)]
pub struct Population {
    pub pool: Arc<Vec<StyledSample>>,
    pub users: Vec<UserData>,
    pub subpops: usize,
}

impl Population {
    pub fn input(&self, s: &LabeledSample) -> &Tensor {
        &self.pool[s.index].input
    }

    /// Held-out (input, preference) pairs of one user.
    pub fn holdout_eval_set(&self, user: usize) -> impl Iterator<Item = (&Tensor, usize)> + '_ {
        self.users[user]
            .data
            .test
            .iter()
            .map(|s| (self.input(s), s.preference))
    }

    pub fn subpop_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.subpops];
        for u in &self.users {
            c[u.subpop] += 1;
        }
        c
    }
}

/// Assigns users to sub-populations and draws each user's local dataset.
///
/// Sub-population `k` prefers style `k`. Users are numbered consecutively
/// by sub-population. Within a user no pooled sample repeats; across users
/// samples are reused freely.
pub fn build_population(pool: Arc<Vec<StyledSample>>, spec: &PopulationSpec) -> Result<Population> {
    spec.validate()?;
    let mut by_style: Vec<Vec<usize>> = vec![Vec::new(); spec.subpops];
    for (i, s) in pool.iter().enumerate() {
        if s.style < spec.subpops {
            by_style[s.style].push(i);
        }
    }
    let per_user = spec.train_per_class + spec.test_per_class;
    for (k, idx) in by_style.iter().enumerate() {
        if idx.is_empty() {
            return Err(FedError::Config(format!(
                "style {k} has no samples in the pool"
            )));
        }
        if idx.len() < per_user {
            return Err(FedError::Config(format!(
                "style {k} has {} samples, each user needs {per_user} distinct positives",
                idx.len()
            )));
        }
    }
    let negatives_available: usize = by_style.iter().map(Vec::len).sum::<usize>();
    let counts = largest_remainder(&spec.proportions, spec.users);
    let mut users = Vec::with_capacity(spec.users);
    for (k, &n) in counts.iter().enumerate() {
        if negatives_available - by_style[k].len() < per_user {
            return Err(FedError::Config(format!(
                "not enough samples outside style {k} to draw {per_user} negatives"
            )));
        }
        for _ in 0..n {
            let user_id = users.len();
            let mut rng = stream_rng(spec.seed, streams::POPULATION, &[user_id as u64]);
            let data = draw_user(&by_style, &pool, k, spec, &mut rng);
            users.push(UserData {
                user_id,
                subpop: k,
                data,
            });
        }
    }
    Ok(Population {
        pool,
        users,
        subpops: spec.subpops,
    })
}

fn draw_user<R: Rng + ?Sized>(
    by_style: &[Vec<usize>],
    pool: &[StyledSample],
    k: usize,
    spec: &PopulationSpec,
    rng: &mut R,
) -> UserDataset {
    let per_user = spec.train_per_class + spec.test_per_class;
    let own = &by_style[k];
    let positives: Vec<usize> = index::sample(rng, own.len(), per_user)
        .into_iter()
        .map(|i| own[i])
        .collect();
    let others: Vec<usize> = (0..by_style.len()).filter(|&s| s != k).collect();
    let mut seen = HashSet::new();
    let mut negatives = Vec::with_capacity(per_user);
    while negatives.len() < per_user {
        let style = others[rng.random_range(0..others.len())];
        let list = &by_style[style];
        let idx = list[rng.random_range(0..list.len())];
        if seen.insert(idx) {
            negatives.push(idx);
        }
    }
    let label = |idx: usize| LabeledSample {
        index: idx,
        style: pool[idx].style,
        preference: usize::from(pool[idx].style == k),
    };
    let t = spec.train_per_class;
    let mut train: Vec<LabeledSample> = positives[..t]
        .iter()
        .chain(&negatives[..t])
        .map(|&i| label(i))
        .collect();
    train.shuffle(rng);
    let test = positives[t..]
        .iter()
        .chain(&negatives[t..])
        .map(|&i| label(i))
        .collect();
    UserDataset { train, test }
}

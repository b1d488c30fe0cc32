//! Evaluation: binary F1, per-sub-population and macro averages, cluster
//! confusion matrices, embedding export and the run report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::StyledSample;
use crate::error::{FedError, Result};
use crate::federation::{HeadChoice, MethodBehavior, UserState};
use crate::model::ModelParams;
use crate::nn::argmax;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `2TP / (2TP + FP + FN)` with positive class 1; 0 when the denominator is 0.
pub fn f1_binary(preds: &[usize], labels: &[usize]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p == 1, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

/// F1 scores of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Summary {
    /// Mean user F1 per sub-population; `None` for empty sub-populations.
    pub per_subpop: Vec<Option<f64>>,
    /// Mean over non-empty sub-populations, each weighted equally.
    pub macro_f1: f64,
    /// Mean over users.
    pub user_mean_f1: f64,
}

/// Aggregates `(sub-population, F1)` pairs of individual users.
pub fn summarize(user_scores: &[(usize, f64)], subpops: usize) -> F1Summary {
    let mut sums = vec![0.0; subpops];
    let mut counts = vec![0usize; subpops];
    for &(k, f) in user_scores {
        sums[k] += f;
        counts[k] += 1;
    }
    let per_subpop: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let present: Vec<f64> = per_subpop.iter().flatten().copied().collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let users: Vec<f64> = user_scores.iter().map(|u| u.1).collect();
    F1Summary {
        macro_f1: mean(&present),
        user_mean_f1: mean(&users),
        per_subpop,
    }
}

/// Predictions of one user on their held-out samples.
pub fn predict_user(
    pool: &[StyledSample],
    user: &UserState,
    params: &ModelParams,
    behavior: &MethodBehavior,
) -> Result<Vec<usize>> {
    let sel = user.classifier(behavior)?;
    user.data
        .test
        .iter()
        .map(|s| {
            Ok(argmax(&params.classify(
                &user.embedding.vector,
                &pool[s.index].input,
                sel,
            )?))
        })
        .collect()
}

/// Every user scored on their own test split with their own embedding and head.
pub fn evaluate_population(
    pool: &[StyledSample],
    users: &[UserState],
    params: &ModelParams,
    behavior: &MethodBehavior,
    subpops: usize,
) -> Result<F1Summary> {
    let mut scores = Vec::with_capacity(users.len());
    for u in users {
        let preds = predict_user(pool, u, params, behavior)?;
        let labels: Vec<usize> = u.data.test.iter().map(|s| s.preference).collect();
        scores.push((u.subpop, f1_binary(&preds, &labels)));
    }
    Ok(summarize(&scores, subpops))
}

/// Entry `(k, c)` counts users of sub-population `k` assigned to cluster `c`.
pub fn cluster_confusion(
    truth: &[usize],
    assigned: &[usize],
    subpops: usize,
    clusters: usize,
) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; clusters]; subpops];
    for (&k, &c) in truth.iter().zip(assigned) {
        m[k][c] += 1;
    }
    m
}

/// Fraction of users on the diagonal of a one-to-one matching between rows
/// and columns, chosen greedily by largest count (ties by lowest row, then
/// column). Equals the optimum for permutation-diagonal matrices.
pub fn matched_diagonal_fraction(confusion: &[Vec<usize>]) -> f64 {
    let total: usize = confusion.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let cols = confusion.first().map_or(0, Vec::len);
    let mut row_used = vec![false; confusion.len()];
    let mut col_used = vec![false; cols];
    let mut matched = 0;
    loop {
        let mut best: Option<(usize, usize, usize)> = None;
        for (r, row) in confusion.iter().enumerate() {
            if row_used[r] {
                continue;
            }
            for (c, &v) in row.iter().enumerate() {
                if !col_used[c] && v > 0 && best.is_none_or(|b| v > b.2) {
                    best = Some((r, c, v));
                }
            }
        }
        let Some((r, c, v)) = best else { break };
        row_used[r] = true;
        col_used[c] = true;
        matched += v;
    }
    matched as f64 / total as f64
}

/// Cluster each user is attributed to: the shared head index, the user id for
/// on-device heads, and 0 for the single global head.
pub fn user_cluster(user: &UserState, behavior: &MethodBehavior) -> usize {
    match behavior.head {
        HeadChoice::Shared(_) => user.assignment,
        HeadChoice::Local => user.user_id,
        HeadChoice::Global => 0,
    }
}

/// Writes `user_id,true_k,assigned,e_0..e_{D-1}`, one row per user in id order.
pub fn export_embeddings(
    users: &[UserState],
    behavior: &MethodBehavior,
    path: &Path,
) -> Result<()> {
    let mut sorted: Vec<&UserState> = users.iter().collect();
    sorted.sort_by_key(|u| u.user_id);
    let dim = sorted.first().map_or(0, |u| u.embedding.vector.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["user_id".to_string(), "true_k".into(), "assigned".into()];
    header.extend((0..dim).map(|i| format!("e_{i}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for u in sorted {
        let mut row = vec![
            u.user_id.to_string(),
            u.subpop.to_string(),
            user_cluster(u, behavior).to_string(),
        ];
        row.extend(u.embedding.vector.iter().map(|v| format!("{v:e}")));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| FedError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> FedError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FedError::io(path, io),
        other => FedError::Serde(format!("{}: {other:?}", path.display())),
    }
}

/// One row of the metric history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Completed rounds at evaluation time.
    pub round: usize,
    pub f1: F1Summary,
    /// Mean client training loss of the last completed round.
    pub train_loss: Option<f64>,
}

/// What the privacy mechanism did during a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrivacyRecord {
    pub enabled: bool,
    /// "client", "server" or "off".
    pub site: String,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    /// Standard deviation of the noise added to each aggregated entry.
    pub noise_std_on_mean: f64,
    pub packets: u64,
    pub clipped_packets: u64,
}

/// Wall-clock data, kept apart so the rest of the report is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_secs: u64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub method: String,
    pub seed: u64,
    /// The fully resolved configuration.
    pub config: serde_json::Value,
    pub history: Vec<EvalRecord>,
    #[serde(rename = "final")]
    pub final_eval: EvalRecord,
    pub subpop_sizes: Vec<usize>,
    /// Sub-population x cluster counts (shared-head methods only).
    pub confusion: Option<Vec<Vec<usize>>>,
    pub assignments: Vec<usize>,
    pub privacy: PrivacyRecord,
    /// File name of the embedding export, when one was written.
    pub embeddings_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timing: Option<Timing>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| FedError::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| FedError::Serde(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f1_examples() {
        assert_eq!(f1_binary(&[1, 0, 1], &[1, 0, 1]), 1.0);
        // TP=2, FP=1, FN=1.
        let f = f1_binary(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0]);
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_binary(&[0, 0], &[0, 0]), 0.0);
    }

    #[test]
    fn constant_positive_on_balanced_split_is_two_thirds() {
        for p in 1..20 {
            let labels: Vec<usize> = (0..2 * p).map(|i| usize::from(i < p)).collect();
            let f = f1_binary(&vec![1; 2 * p], &labels);
            assert!((f - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn coin_flip_predictor_scores_about_half() {
        // Monte-Carlo oracle: per-user F1 of a fair coin on a 5+5 split,
        // averaged over many users.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels: Vec<usize> = (0..10).map(|i| usize::from(i < 5)).collect();
        let scores: Vec<(usize, f64)> = (0..3000)
            .map(|u| {
                let preds: Vec<usize> = (0..10).map(|_| rng.random_range(0..2)).collect();
                (u % 10, f1_binary(&preds, &labels))
            })
            .collect();
        let s = summarize(&scores, 10);
        assert!((s.macro_f1 - 0.5).abs() < 0.1, "{}", s.macro_f1);
    }

    #[test]
    fn macro_weights_subpops_equally() {
        let s = summarize(&[(0, 1.0), (0, 1.0), (0, 1.0), (1, 0.0)], 3);
        assert_eq!(s.per_subpop, vec![Some(1.0), Some(0.0), None]);
        assert_eq!(s.macro_f1, 0.5);
        assert_eq!(s.user_mean_f1, 0.75);
    }

    #[test]
    fn confusion_examples() {
        let truth = [0, 0, 1, 1, 2];
        let m = cluster_confusion(&truth, &[2, 2, 0, 0, 1], 3, 3);
        assert_eq!(m, vec![vec![0, 0, 2], vec![2, 0, 0], vec![0, 1, 0]]);
        assert_eq!(matched_diagonal_fraction(&m), 1.0);
        let collapsed = cluster_confusion(&truth, &[1; 5], 3, 3);
        assert!(collapsed.iter().all(|r| r[0] == 0 && r[2] == 0));
        assert_eq!(matched_diagonal_fraction(&collapsed), 0.4);
    }

    proptest! {
        #[test]
        fn confusion_rows_sum_to_subpop_sizes(
            pairs in prop::collection::vec((0usize..4, 0usize..5), 0..60),
        ) {
            let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let assigned: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let m = cluster_confusion(&truth, &assigned, 4, 5);
            for (k, row) in m.iter().enumerate() {
                prop_assert_eq!(row.iter().sum::<usize>(), truth.iter().filter(|&&t| t == k).count());
            }
            prop_assert_eq!(m.iter().flatten().sum::<usize>(), pairs.len());
        }

        #[test]
        fn macro_is_invariant_to_subpop_order(
            scores in prop::collection::vec((0usize..5, 0.0f64..1.0), 1..40),
            shift in 0usize..5,
        ) {
            let a = summarize(&scores, 5);
            let permuted: Vec<(usize, f64)> = scores.iter().map(|&(k, f)| ((k + shift) % 5, f)).collect();
            let b = summarize(&permuted, 5);
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a.macro_f1));
        }
    }
}

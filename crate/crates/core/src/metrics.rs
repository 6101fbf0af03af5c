//! Offline evaluation measures: positive and negative recall@K, uniquely
//! retrieved items, over-popular dominance and the exposure Gini coefficient.
//!
//! Recall is macro-averaged: each user's hit fraction counts once, and users
//! with an empty held-out set for that label are left out of the mean.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logging::{ExposureCounts, ImpressionRecord};
use crate::world::{ItemId, UserId};

/// Ranked retrieval lists per user.
pub type Retrievals = BTreeMap<UserId, Vec<ItemId>>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvaluationSet {
    positives: BTreeMap<UserId, BTreeSet<ItemId>>,
    negatives: BTreeMap<UserId, BTreeSet<ItemId>>,
}

impl EvaluationSet {
    /// Builds held-out sets from log records. An item both engaged and
    /// skipped by the same user across the held-out records counts as a
    /// positive only.
    pub fn from_records(records: &[ImpressionRecord]) -> Self {
        let mut set = EvaluationSet::default();
        for r in records.iter().filter(|r| r.label.is_positive()) {
            set.positives.entry(r.user_id).or_default().insert(r.item_id);
        }
        for r in records.iter().filter(|r| !r.label.is_positive()) {
            let is_pos = set.positives.get(&r.user_id).is_some_and(|s| s.contains(&r.item_id));
            if !is_pos {
                set.negatives.entry(r.user_id).or_default().insert(r.item_id);
            }
        }
        set
    }

    pub fn from_sets(
        positives: BTreeMap<UserId, BTreeSet<ItemId>>,
        negatives: BTreeMap<UserId, BTreeSet<ItemId>>,
    ) -> Result<Self> {
        for (u, pos) in &positives {
            if let Some(neg) = negatives.get(u) {
                if !pos.is_disjoint(neg) {
                    return Err(Error::Shape(format!(
                        "user {u} has items in both held-out sets"
                    )));
                }
            }
        }
        Ok(EvaluationSet { positives, negatives })
    }

    pub fn positives(&self) -> &BTreeMap<UserId, BTreeSet<ItemId>> {
        &self.positives
    }

    pub fn negatives(&self) -> &BTreeMap<UserId, BTreeSet<ItemId>> {
        &self.negatives
    }

    /// Every user with at least one held-out record, ascending.
    pub fn users(&self) -> Vec<UserId> {
        let all: BTreeSet<UserId> = self.positives.keys().chain(self.negatives.keys()).copied().collect();
        all.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub positive_recall_at_k: f64,
    pub negative_recall_at_k: f64,
    pub unique_retrieved: usize,
    pub popular_dominance: f64,
    pub exposure_gini: f64,
    pub k: usize,
    pub gamma: f64,
    pub n_eval_users: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "gamma,k,n_eval_users,positive_recall_at_k,negative_recall_at_k,unique_retrieved,popular_dominance,exposure_gini";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.gamma,
            self.k,
            self.n_eval_users,
            self.positive_recall_at_k,
            self.negative_recall_at_k,
            self.unique_retrieved,
            self.popular_dominance,
            self.exposure_gini
        )
    }
}

fn macro_recall(retrievals: &Retrievals, truth: &BTreeMap<UserId, BTreeSet<ItemId>>, what: &str) -> Result<f64> {
    let mut sum = 0.0;
    let mut users = 0usize;
    for (user, held_out) in truth {
        if held_out.is_empty() {
            continue;
        }
        let hits = retrievals.get(user).map_or(0, |list| {
            let retrieved: HashSet<&ItemId> = list.iter().collect();
            held_out.iter().filter(|v| retrieved.contains(v)).count()
        });
        sum += hits as f64 / held_out.len() as f64;
        users += 1;
    }
    if users == 0 {
        return Err(Error::EmptyEvaluation(format!("no user has held-out {what}")));
    }
    Ok(sum / users as f64)
}

pub fn positive_recall_at_k(retrievals: &Retrievals, eval: &EvaluationSet) -> Result<f64> {
    macro_recall(retrievals, &eval.positives, "positives")
}

pub fn negative_recall_at_k(retrievals: &Retrievals, eval: &EvaluationSet) -> Result<f64> {
    macro_recall(retrievals, &eval.negatives, "negatives")
}

pub fn unique_retrieved_items(retrievals: &Retrievals) -> usize {
    retrievals.values().flatten().collect::<HashSet<_>>().len()
}

/// The `ceil(top_fraction * n_items)` most exposed items, ties toward lower ids.
pub fn most_exposed_items(counts: &ExposureCounts, top_fraction: f64) -> HashSet<ItemId> {
    let n = counts.n_items();
    let h = ((top_fraction * n as f64).ceil() as usize).min(n);
    let mut order: Vec<ItemId> = (0..n).collect();
    let c = counts.counts();
    order.sort_by(|&a, &b| c[b].cmp(&c[a]).then(a.cmp(&b)));
    order.truncate(h);
    order.into_iter().collect()
}

/// Share of retrieval slots filled by the most exposed `top_fraction` of the catalog.
pub fn popular_dominance(retrievals: &Retrievals, counts: &ExposureCounts, top_fraction: f64) -> Result<f64> {
    if !(top_fraction > 0.0 && top_fraction < 1.0) {
        return Err(Error::config("top_fraction", "must lie in (0, 1)"));
    }
    let head = most_exposed_items(counts, top_fraction);
    let slots: usize = retrievals.values().map(Vec::len).sum();
    if slots == 0 {
        return Ok(0.0);
    }
    let in_head = retrievals.values().flatten().filter(|v| head.contains(v)).count();
    Ok(in_head as f64 / slots as f64)
}

/// Gini coefficient of the per-item exposure counts.
pub fn exposure_gini(counts: &ExposureCounts) -> Result<f64> {
    let values: Vec<f64> = counts.counts().iter().map(|&c| c as f64).collect();
    gini(&values)
}

/// Gini coefficient `sum_i sum_j |x_i - x_j| / (2 n^2 mean)` of non-negative
/// values, computed from the sorted form.
pub fn gini(values: &[f64]) -> Result<f64> {
    let total: f64 = values.iter().sum();
    if values.is_empty() || total <= 0.0 {
        return Err(Error::Undefined("gini of an all-zero exposure vector".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x)
        .sum();
    Ok(weighted / (n * total))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape("spearman needs two equal-length series of >= 2 values".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Undefined("spearman of a constant series".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

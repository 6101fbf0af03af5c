//! Inference-time exposure correction and exact top-K retrieval.
//!
//! The corrected score `eng_exp_logit - gamma * exp_logit` is evaluated as a
//! single inner product through composite embeddings:
//!
//! ```text
//! user side: [ user_eng[u] | -gamma * user_exp[u] | 1 ]
//! item side: [ item_eng[v] |  item_exp[v]         | item_eng_bias[v] - gamma * item_exp_bias[v] ]
//! ```
//!
//! so any inner-product index over the item side serves the corrected ranking.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::dot;
use crate::model::ModelParams;
use crate::world::{ItemId, UserId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub gamma: f64,
    pub k: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig { gamma: 0.65, k: 100 }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        check_gamma("scoring.gamma", self.gamma)?;
        if self.k == 0 {
            return Err(Error::config("scoring.k", "must be >= 1"));
        }
        Ok(())
    }
}

pub(crate) fn check_gamma(field: &str, gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::config(field, format!("gamma must be a finite real >= 0, got {gamma}")));
    }
    Ok(())
}

/// Count-level conditional engagement rate `positives / exposures`.
pub fn conditional_positive_rate(positives: u64, exposures: u64) -> Result<f64> {
    if exposures == 0 {
        return Err(Error::UndefinedRate);
    }
    if positives > exposures {
        return Err(Error::InconsistentCounts {
            positives,
            exposures,
        });
    }
    Ok(positives as f64 / exposures as f64)
}

/// Logit-space correction; a ranking score, never squashed.
#[inline]
pub fn exposure_corrected_score(eng_exp_logit: f64, exp_logit: f64, gamma: f64) -> f64 {
    eng_exp_logit - gamma * exp_logit
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item: ItemId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    composite_item: Vec<f64>,
    width: usize,
    n_items: usize,
    dim: usize,
    exp_dim: usize,
    gamma: f64,
    built_from: String,
}

pub fn build_index(params: &ModelParams, gamma: f64) -> Result<RetrievalIndex> {
    check_gamma("gamma", gamma)?;
    if !params.is_finite() {
        return Err(Error::Shape("cannot index non-finite parameters".into()));
    }
    let (d, de) = (params.dim(), params.exp_dim());
    let width = d + de + 1;
    let mut composite_item = Vec::with_capacity(params.n_items() * width);
    for v in 0..params.n_items() {
        composite_item.extend_from_slice(params.item_eng(v));
        composite_item.extend_from_slice(params.item_exp(v));
        composite_item.push(params.item_eng_bias()[v] - gamma * params.item_exp_bias()[v]);
    }
    Ok(RetrievalIndex {
        composite_item,
        width,
        n_items: params.n_items(),
        dim: d,
        exp_dim: de,
        gamma,
        built_from: params.fingerprint(),
    })
}

impl RetrievalIndex {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Fingerprint of the parameters the index was built from.
    pub fn built_from(&self) -> &str {
        &self.built_from
    }

    pub fn composite_item(&self, item: ItemId) -> &[f64] {
        &self.composite_item[item * self.width..(item + 1) * self.width]
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.n_items() != self.n_items || params.dim() != self.dim || params.exp_dim() != self.exp_dim {
            return Err(Error::Shape("parameters do not match the index layout".into()));
        }
        Ok(())
    }

    pub fn composite_user(&self, params: &ModelParams, user: UserId) -> Result<Vec<f64>> {
        self.check_params(params)?;
        composite_user(params, user, self.gamma)
    }

    /// Corrected score of every catalog item for `user`.
    pub fn score_all(&self, params: &ModelParams, user: UserId) -> Result<Vec<f64>> {
        let q = self.composite_user(params, user)?;
        Ok(self.composite_item.chunks_exact(self.width).map(|row| dot(&q, row)).collect())
    }
}

pub fn composite_user(params: &ModelParams, user: UserId, gamma: f64) -> Result<Vec<f64>> {
    if user >= params.n_users() {
        return Err(Error::Index {
            kind: "user",
            index: user,
            len: params.n_users(),
        });
    }
    let mut q = Vec::with_capacity(params.dim() + params.exp_dim() + 1);
    q.extend_from_slice(params.user_eng(user));
    q.extend(params.user_exp(user).iter().map(|x| -gamma * x));
    q.push(1.0);
    Ok(q)
}

/// Descending score, ascending item id on ties.
pub fn rank_order(a: &ScoredItem, b: &ScoredItem) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.item.cmp(&b.item))
}

/// Exact top-`k` by full scan and partial selection.
pub fn retrieve_top_k(
    index: &RetrievalIndex,
    params: &ModelParams,
    user: UserId,
    k: usize,
    exclude: &HashSet<ItemId>,
) -> Result<Vec<ScoredItem>> {
    if k == 0 {
        return Err(Error::config("k", "must be >= 1"));
    }
    let excluded = exclude.iter().filter(|&&v| v < index.n_items).count();
    let available = index.n_items - excluded;
    if k > available {
        return Err(Error::config(
            "k",
            format!("{k} exceeds the {available} retrievable items"),
        ));
    }
    let scores = index.score_all(params, user)?;
    let mut candidates: Vec<ScoredItem> = scores
        .into_iter()
        .enumerate()
        .filter(|(v, _)| !exclude.contains(v))
        .map(|(item, score)| ScoredItem { item, score })
        .collect();
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, rank_order);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(rank_order);
    Ok(candidates)
}

/// One line per retrieved item: `user_id,rank,item_id,score` (rank is 1-based).
pub fn write_retrievals_csv(path: &Path, results: &[(UserId, Vec<ScoredItem>)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "user_id,rank,item_id,score")?;
    for (user, list) in results {
        for (rank, s) in list.iter().enumerate() {
            writeln!(out, "{},{},{},{}", user, rank + 1, s.item, s.score)?;
        }
    }
    out.flush()?;
    Ok(())
}

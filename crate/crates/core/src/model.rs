//! Two-tower, two-head retrieval model and its trainer.
//!
//! Head one scores the joint event "engaged and exposed", head two scores
//! "exposed". Each head is an independent pair of id-embedding tables plus an
//! item bias, so both logits are plain biased inner products:
//!
//! ```text
//! eng_exp_logit(u, v) = <user_eng[u], item_eng[v]> + item_eng_bias[v]
//! exp_logit(u, v)     = <user_exp[u], item_exp[v]> + item_exp_bias[v]
//! ```
//!
//! The objective over a batch is
//! `sum BCE(eng_exp_logit, engaged) + w * BCE(exp_logit, exposed) + l2 * |touched rows|^2`,
//! minimized with plain mini-batch gradient descent on the summed batch loss.
//! When `w == 0` the exposure head is absent from the objective entirely,
//! including its regularizer, so its tables stay at initialization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::logging::{ExposureCounts, ImpressionRecord};
use crate::math::{dot, sigmoid, stream};
use crate::world::{ItemId, UserId};

const MODEL_FORMAT: &str = "exposure-model";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingExample {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub exposed: bool,
    /// Joint "engaged and exposed" label; never set without `exposed`.
    pub engaged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight `w` of the exposure task in the combined loss.
    pub exposure_task_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub random_negatives_per_record: usize,
    pub embed_dim: usize,
    pub exposure_embed_dim: usize,
    pub l2_reg: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            exposure_task_weight: 1.0,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 256,
            random_negatives_per_record: 4,
            embed_dim: 16,
            exposure_embed_dim: 16,
            l2_reg: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.exposure_task_weight;
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::config("train.exposure_task_weight", "must be a real >= 0"));
        }
        // Zero is accepted so that "no update" runs can be expressed.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("train.learning_rate", "must be a finite real >= 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("train.embed_dim", "must be >= 1"));
        }
        if self.exposure_embed_dim == 0 {
            return Err(Error::config("train.exposure_embed_dim", "must be >= 1"));
        }
        if !(self.l2_reg.is_finite() && self.l2_reg >= 0.0) {
            return Err(Error::config("train.l2_reg", "must be a real >= 0"));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("train config serializes");
        short_hash(&Sha256::digest(&bytes))
    }
}

fn short_hash(digest: &[u8]) -> String {
    hex::encode(&digest[..8])
}

/// A single scalar parameter, addressed by table and position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinate {
    UserEng(UserId, usize),
    ItemEng(ItemId, usize),
    ItemEngBias(ItemId),
    UserExp(UserId, usize),
    ItemExp(ItemId, usize),
    ItemExpBias(ItemId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    n_users: usize,
    n_items: usize,
    dim: usize,
    exp_dim: usize,
    user_eng: Vec<f64>,
    item_eng: Vec<f64>,
    item_eng_bias: Vec<f64>,
    user_exp: Vec<f64>,
    item_exp: Vec<f64>,
    item_exp_bias: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize, exp_dim: usize) -> Self {
        ModelParams {
            n_users,
            n_items,
            dim,
            exp_dim,
            user_eng: vec![0.0; n_users * dim],
            item_eng: vec![0.0; n_items * dim],
            item_eng_bias: vec![0.0; n_items],
            user_exp: vec![0.0; n_users * exp_dim],
            item_exp: vec![0.0; n_items * exp_dim],
            item_exp_bias: vec![0.0; n_items],
        }
    }

    /// Embeddings i.i.d. `N(0, (0.1 / sqrt(dim))^2)` per head, biases zero.
    pub fn init(n_users: usize, n_items: usize, dim: usize, exp_dim: usize, seed: u64) -> Self {
        let mut params = ModelParams::zeros(n_users, n_items, dim, exp_dim);
        let mut rng = stream(seed, &[0x1417]);
        let eng = Normal::new(0.0, 0.1 / (dim as f64).sqrt()).unwrap();
        let exp = Normal::new(0.0, 0.1 / (exp_dim as f64).sqrt()).unwrap();
        for x in params.user_eng.iter_mut().chain(params.item_eng.iter_mut()) {
            *x = eng.sample(&mut rng);
        }
        for x in params.user_exp.iter_mut().chain(params.item_exp.iter_mut()) {
            *x = exp.sample(&mut rng);
        }
        params
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn exp_dim(&self) -> usize {
        self.exp_dim
    }

    pub fn user_eng(&self, u: UserId) -> &[f64] {
        &self.user_eng[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item_eng(&self, v: ItemId) -> &[f64] {
        &self.item_eng[v * self.dim..(v + 1) * self.dim]
    }

    pub fn user_exp(&self, u: UserId) -> &[f64] {
        &self.user_exp[u * self.exp_dim..(u + 1) * self.exp_dim]
    }

    pub fn item_exp(&self, v: ItemId) -> &[f64] {
        &self.item_exp[v * self.exp_dim..(v + 1) * self.exp_dim]
    }

    pub fn item_eng_bias(&self) -> &[f64] {
        &self.item_eng_bias
    }

    pub fn item_exp_bias(&self) -> &[f64] {
        &self.item_exp_bias
    }

    pub fn user_eng_mut(&mut self, u: UserId) -> &mut [f64] {
        &mut self.user_eng[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item_eng_mut(&mut self, v: ItemId) -> &mut [f64] {
        &mut self.item_eng[v * self.dim..(v + 1) * self.dim]
    }

    pub fn user_exp_mut(&mut self, u: UserId) -> &mut [f64] {
        &mut self.user_exp[u * self.exp_dim..(u + 1) * self.exp_dim]
    }

    pub fn item_exp_mut(&mut self, v: ItemId) -> &mut [f64] {
        &mut self.item_exp[v * self.exp_dim..(v + 1) * self.exp_dim]
    }

    pub fn item_eng_bias_mut(&mut self) -> &mut [f64] {
        &mut self.item_eng_bias
    }

    pub fn item_exp_bias_mut(&mut self) -> &mut [f64] {
        &mut self.item_exp_bias
    }

    pub fn coordinate(&self, c: Coordinate) -> f64 {
        match c {
            Coordinate::UserEng(u, k) => self.user_eng(u)[k],
            Coordinate::ItemEng(v, k) => self.item_eng(v)[k],
            Coordinate::ItemEngBias(v) => self.item_eng_bias[v],
            Coordinate::UserExp(u, k) => self.user_exp(u)[k],
            Coordinate::ItemExp(v, k) => self.item_exp(v)[k],
            Coordinate::ItemExpBias(v) => self.item_exp_bias[v],
        }
    }

    pub fn coordinate_mut(&mut self, c: Coordinate) -> &mut f64 {
        match c {
            Coordinate::UserEng(u, k) => &mut self.user_eng_mut(u)[k],
            Coordinate::ItemEng(v, k) => &mut self.item_eng_mut(v)[k],
            Coordinate::ItemEngBias(v) => &mut self.item_eng_bias[v],
            Coordinate::UserExp(u, k) => &mut self.user_exp_mut(u)[k],
            Coordinate::ItemExp(v, k) => &mut self.item_exp_mut(v)[k],
            Coordinate::ItemExpBias(v) => &mut self.item_exp_bias[v],
        }
    }

    fn tables(&self) -> [&[f64]; 6] {
        [
            &self.user_eng,
            &self.item_eng,
            &self.item_eng_bias,
            &self.user_exp,
            &self.item_exp,
            &self.item_exp_bias,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tables().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Content hash over dimensions and every table entry.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for d in [self.n_users, self.n_items, self.dim, self.exp_dim] {
            hasher.update((d as u64).to_le_bytes());
        }
        for table in self.tables() {
            for x in table {
                hasher.update(x.to_le_bytes());
            }
        }
        short_hash(&hasher.finalize())
    }

    fn check_ids(&self, user: UserId, item: ItemId) -> Result<()> {
        if user >= self.n_users {
            return Err(Error::Index {
                kind: "user",
                index: user,
                len: self.n_users,
            });
        }
        if item >= self.n_items {
            return Err(Error::Index {
                kind: "item",
                index: item,
                len: self.n_items,
            });
        }
        Ok(())
    }

    /// `(eng_exp_logit, exp_logit)` for one pair.
    pub fn forward(&self, user: UserId, item: ItemId) -> Result<(f64, f64)> {
        self.check_ids(user, item)?;
        Ok(self.forward_unchecked(user, item))
    }

    #[inline]
    pub(crate) fn forward_unchecked(&self, user: UserId, item: ItemId) -> (f64, f64) {
        (
            dot(self.user_eng(user), self.item_eng(item)) + self.item_eng_bias[item],
            dot(self.user_exp(user), self.item_exp(item)) + self.item_exp_bias[item],
        )
    }

    /// Per-item predicted exposure probability `sigma(exp_logit)` averaged over all users.
    pub fn mean_exposure_probability(&self) -> Vec<f64> {
        (0..self.n_items)
            .into_par_iter()
            .map(|v| {
                let item = self.item_exp(v);
                let b = self.item_exp_bias[v];
                let sum: f64 = (0..self.n_users)
                    .map(|u| sigmoid(dot(self.user_exp(u), item) + b))
                    .sum();
                sum / self.n_users as f64
            })
            .collect()
    }

    pub fn save_snapshot(&self, path: &Path, config: &TrainConfig) -> Result<()> {
        let snapshot = ModelSnapshot {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            fingerprint: self.fingerprint(),
            config_fingerprint: config.fingerprint(),
            params: self.clone(),
        };
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, &snapshot)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    /// Loads a snapshot, rejecting unknown versions and content that does not
    /// hash to the recorded fingerprint.
    pub fn load_snapshot(path: &Path) -> Result<ModelParams> {
        let snapshot: ModelSnapshot = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if snapshot.format != MODEL_FORMAT || snapshot.version != MODEL_VERSION {
            return Err(Error::Snapshot(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                snapshot.format, snapshot.version
            )));
        }
        let p = snapshot.params;
        let shapes = [
            (p.user_eng.len(), p.n_users * p.dim),
            (p.item_eng.len(), p.n_items * p.dim),
            (p.item_eng_bias.len(), p.n_items),
            (p.user_exp.len(), p.n_users * p.exp_dim),
            (p.item_exp.len(), p.n_items * p.exp_dim),
            (p.item_exp_bias.len(), p.n_items),
        ];
        if shapes.iter().any(|(got, want)| got != want) {
            return Err(Error::Shape("snapshot tables do not match recorded dims".into()));
        }
        if p.fingerprint() != snapshot.fingerprint {
            return Err(Error::Snapshot("fingerprint mismatch".into()));
        }
        Ok(p)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelSnapshot {
    format: String,
    version: u32,
    fingerprint: String,
    config_fingerprint: String,
    params: ModelParams,
}

/// Expands exposure logs into training examples. Every record contributes one
/// exposed example; each additionally spawns `random_negatives_per_record`
/// unexposed examples for the same user on uniformly drawn items. Draws are
/// not checked against the user's real exposures.
pub fn build_training_set<R: Rng + ?Sized>(
    logs: &[ImpressionRecord],
    n_items: usize,
    random_negatives_per_record: usize,
    rng: &mut R,
) -> Result<Vec<TrainingExample>> {
    if logs.is_empty() {
        return Err(Error::EmptyInput("no impression records to train on".into()));
    }
    if n_items == 0 {
        return Err(Error::config("n_items", "must be >= 1"));
    }
    let mut out = Vec::with_capacity(logs.len() * (1 + random_negatives_per_record));
    for r in logs {
        out.push(TrainingExample {
            user_id: r.user_id,
            item_id: r.item_id,
            exposed: true,
            engaged: r.label.is_positive(),
        });
        for _ in 0..random_negatives_per_record {
            out.push(TrainingExample {
                user_id: r.user_id,
                item_id: rng.random_range(0..n_items),
                exposed: false,
                engaged: false,
            });
        }
    }
    Ok(out)
}

/// Numerically stable binary cross-entropy on a logit.
#[inline]
pub fn bce_loss(logit: f64, label: bool) -> f64 {
    let y = if label { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// `(bce_loss(x, y), sigmoid(x) - y)` sharing one exponential.
#[inline]
fn logistic_terms(x: f64, label: bool) -> (f64, f64) {
    let y = if label { 1.0 } else { 0.0 };
    let e = (-x.abs()).exp();
    let p = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (x.max(0.0) - x * y + e.ln_1p(), p - y)
}

#[derive(Debug, Clone, Copy)]
struct Objective {
    exposure_weight: f64,
    l2_reg: f64,
}

impl Objective {
    fn exposure_active(&self) -> bool {
        self.exposure_weight > 0.0
    }
}

/// Sparse gradient of the batch objective: only touched rows are stored.
#[derive(Debug, Clone)]
pub struct Gradients {
    dim: usize,
    exp_dim: usize,
    user_slot: Vec<u32>,
    item_slot: Vec<u32>,
    users: Vec<UserId>,
    items: Vec<ItemId>,
    user_eng: Vec<f64>,
    user_exp: Vec<f64>,
    item_eng: Vec<f64>,
    item_exp: Vec<f64>,
    item_eng_bias: Vec<f64>,
    item_exp_bias: Vec<f64>,
}

const UNTOUCHED: u32 = u32::MAX;

impl Gradients {
    fn for_params(params: &ModelParams) -> Self {
        Gradients {
            dim: params.dim,
            exp_dim: params.exp_dim,
            user_slot: vec![UNTOUCHED; params.n_users],
            item_slot: vec![UNTOUCHED; params.n_items],
            users: Vec::new(),
            items: Vec::new(),
            user_eng: Vec::new(),
            user_exp: Vec::new(),
            item_eng: Vec::new(),
            item_exp: Vec::new(),
            item_eng_bias: Vec::new(),
            item_exp_bias: Vec::new(),
        }
    }

    fn clear(&mut self) {
        for &u in &self.users {
            self.user_slot[u] = UNTOUCHED;
        }
        for &v in &self.items {
            self.item_slot[v] = UNTOUCHED;
        }
        self.users.clear();
        self.items.clear();
        self.user_eng.clear();
        self.user_exp.clear();
        self.item_eng.clear();
        self.item_exp.clear();
        self.item_eng_bias.clear();
        self.item_exp_bias.clear();
    }

    fn user_index(&mut self, u: UserId) -> usize {
        if self.user_slot[u] == UNTOUCHED {
            self.user_slot[u] = self.users.len() as u32;
            self.users.push(u);
            self.user_eng.resize(self.user_eng.len() + self.dim, 0.0);
            self.user_exp.resize(self.user_exp.len() + self.exp_dim, 0.0);
        }
        self.user_slot[u] as usize
    }

    fn item_index(&mut self, v: ItemId) -> usize {
        if self.item_slot[v] == UNTOUCHED {
            self.item_slot[v] = self.items.len() as u32;
            self.items.push(v);
            self.item_eng.resize(self.item_eng.len() + self.dim, 0.0);
            self.item_exp.resize(self.item_exp.len() + self.exp_dim, 0.0);
            self.item_eng_bias.push(0.0);
            self.item_exp_bias.push(0.0);
        }
        self.item_slot[v] as usize
    }

    pub fn touched_users(&self) -> &[UserId] {
        &self.users
    }

    pub fn touched_items(&self) -> &[ItemId] {
        &self.items
    }

    fn user_slot_of(&self, u: UserId) -> Option<usize> {
        self.user_slot.get(u).filter(|&&s| s != UNTOUCHED).map(|&s| s as usize)
    }

    fn item_slot_of(&self, v: ItemId) -> Option<usize> {
        self.item_slot.get(v).filter(|&&s| s != UNTOUCHED).map(|&s| s as usize)
    }

    /// Gradient of one coordinate; zero for rows the batch never touched.
    pub fn coordinate(&self, c: Coordinate) -> f64 {
        let (d, de) = (self.dim, self.exp_dim);
        match c {
            Coordinate::UserEng(u, k) => self.user_slot_of(u).map_or(0.0, |s| self.user_eng[s * d + k]),
            Coordinate::UserExp(u, k) => self.user_slot_of(u).map_or(0.0, |s| self.user_exp[s * de + k]),
            Coordinate::ItemEng(v, k) => self.item_slot_of(v).map_or(0.0, |s| self.item_eng[s * d + k]),
            Coordinate::ItemExp(v, k) => self.item_slot_of(v).map_or(0.0, |s| self.item_exp[s * de + k]),
            Coordinate::ItemEngBias(v) => self.item_slot_of(v).map_or(0.0, |s| self.item_eng_bias[s]),
            Coordinate::ItemExpBias(v) => self.item_slot_of(v).map_or(0.0, |s| self.item_exp_bias[s]),
        }
    }

    /// Gradient row for a user's engagement embedding, zeros if untouched.
    pub fn user_eng_row(&self, u: UserId) -> Vec<f64> {
        (0..self.dim).map(|k| self.coordinate(Coordinate::UserEng(u, k))).collect()
    }

    pub fn user_exp_row(&self, u: UserId) -> Vec<f64> {
        (0..self.exp_dim).map(|k| self.coordinate(Coordinate::UserExp(u, k))).collect()
    }

    /// `params -= learning_rate * self` over touched rows.
    pub fn apply(&self, params: &mut ModelParams, learning_rate: f64) {
        let (d, de) = (self.dim, self.exp_dim);
        for (s, &u) in self.users.iter().enumerate() {
            axpy(params.user_eng_mut(u), -learning_rate, &self.user_eng[s * d..(s + 1) * d]);
            axpy(params.user_exp_mut(u), -learning_rate, &self.user_exp[s * de..(s + 1) * de]);
        }
        for (s, &v) in self.items.iter().enumerate() {
            axpy(params.item_eng_mut(v), -learning_rate, &self.item_eng[s * d..(s + 1) * d]);
            axpy(params.item_exp_mut(v), -learning_rate, &self.item_exp[s * de..(s + 1) * de]);
            params.item_eng_bias[v] -= learning_rate * self.item_eng_bias[s];
            params.item_exp_bias[v] -= learning_rate * self.item_exp_bias[s];
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn check_batch(params: &ModelParams, batch: &[TrainingExample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    for ex in batch {
        params.check_ids(ex.user_id, ex.item_id)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
struct BatchTotals {
    engagement_bce: f64,
    exposure_bce: f64,
    weighted: f64,
}

/// Accumulates loss terms and gradients for one batch into `grads`
/// (which must be clear). Returns the data-term totals; the regularizer is
/// added to `weighted` as well.
fn accumulate<W: Fn(&TrainingExample) -> f64>(
    params: &ModelParams,
    batch: &[TrainingExample],
    objective: Objective,
    weight: &W,
    grads: &mut Gradients,
) -> BatchTotals {
    let (d, de) = (params.dim, params.exp_dim);
    let exposure_on = objective.exposure_active();
    let mut totals = BatchTotals::default();
    for ex in batch {
        let (u, v) = (ex.user_id, ex.item_id);
        let wt = weight(ex);
        let (eng_logit, exp_logit) = params.forward_unchecked(u, v);
        let (eng_bce, eng_residual) = logistic_terms(eng_logit, ex.engaged);
        let (exp_bce, exp_residual) = logistic_terms(exp_logit, ex.exposed);
        totals.engagement_bce += eng_bce;
        totals.exposure_bce += exp_bce;
        totals.weighted += wt * eng_bce;
        if exposure_on {
            totals.weighted += wt * objective.exposure_weight * exp_bce;
        }

        let su = grads.user_index(u);
        let sv = grads.item_index(v);
        let g_eng = wt * eng_residual;
        axpy(&mut grads.user_eng[su * d..(su + 1) * d], g_eng, params.item_eng(v));
        axpy(&mut grads.item_eng[sv * d..(sv + 1) * d], g_eng, params.user_eng(u));
        grads.item_eng_bias[sv] += g_eng;
        if exposure_on {
            let g_exp = wt * objective.exposure_weight * exp_residual;
            axpy(&mut grads.user_exp[su * de..(su + 1) * de], g_exp, params.item_exp(v));
            axpy(&mut grads.item_exp[sv * de..(sv + 1) * de], g_exp, params.user_exp(u));
            grads.item_exp_bias[sv] += g_exp;
        }
    }

    let l2 = objective.l2_reg;
    if l2 > 0.0 {
        for s in 0..grads.users.len() {
            let u = grads.users[s];
            totals.weighted += l2 * sq_norm(params.user_eng(u));
            axpy(&mut grads.user_eng[s * d..(s + 1) * d], 2.0 * l2, params.user_eng(u));
            if exposure_on {
                totals.weighted += l2 * sq_norm(params.user_exp(u));
                axpy(&mut grads.user_exp[s * de..(s + 1) * de], 2.0 * l2, params.user_exp(u));
            }
        }
        for s in 0..grads.items.len() {
            let v = grads.items[s];
            totals.weighted += l2 * sq_norm(params.item_eng(v));
            axpy(&mut grads.item_eng[s * d..(s + 1) * d], 2.0 * l2, params.item_eng(v));
            if exposure_on {
                totals.weighted += l2 * sq_norm(params.item_exp(v));
                axpy(&mut grads.item_exp[s * de..(s + 1) * de], 2.0 * l2, params.item_exp(v));
            }
        }
    }
    totals
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum()
}

/// Summed multi-task objective over `batch`.
pub fn batch_loss(params: &ModelParams, batch: &[TrainingExample], w: f64, l2_reg: f64) -> Result<f64> {
    weighted_batch_loss(params, batch, &|_| 1.0, w, l2_reg)
}

/// Like [`batch_loss`] with a per-example multiplier on both BCE terms.
pub fn weighted_batch_loss<W: Fn(&TrainingExample) -> f64>(
    params: &ModelParams,
    batch: &[TrainingExample],
    weight: &W,
    w: f64,
    l2_reg: f64,
) -> Result<f64> {
    Ok(weighted_gradients(params, batch, weight, w, l2_reg)?.0)
}

/// Exact gradient of [`batch_loss`].
pub fn gradients(params: &ModelParams, batch: &[TrainingExample], w: f64, l2_reg: f64) -> Result<Gradients> {
    Ok(weighted_gradients(params, batch, &|_| 1.0, w, l2_reg)?.1)
}

pub fn weighted_gradients<W: Fn(&TrainingExample) -> f64>(
    params: &ModelParams,
    batch: &[TrainingExample],
    weight: &W,
    w: f64,
    l2_reg: f64,
) -> Result<(f64, Gradients)> {
    check_batch(params, batch)?;
    let objective = Objective {
        exposure_weight: w,
        l2_reg,
    };
    let mut grads = Gradients::for_params(params);
    let totals = accumulate(params, batch, objective, weight, &mut grads);
    Ok((totals.weighted, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_engagement_bce: f64,
    pub mean_exposure_bce: f64,
    /// Mean weighted objective per example, regularizer included.
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<EpochLoss>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |e| e.total)
    }
}

fn check_logs(logs: &[ImpressionRecord], n_users: usize, n_items: usize) -> Result<()> {
    if logs.is_empty() {
        return Err(Error::EmptyInput("no impression records to train on".into()));
    }
    for r in logs {
        if r.user_id >= n_users {
            return Err(Error::Index {
                kind: "user",
                index: r.user_id,
                len: n_users,
            });
        }
        if r.item_id >= n_items {
            return Err(Error::Index {
                kind: "item",
                index: r.item_id,
                len: n_items,
            });
        }
    }
    Ok(())
}

/// Joint two-head training on exposure logs.
pub fn train(logs: &[ImpressionRecord], config: &TrainConfig, n_users: usize, n_items: usize) -> Result<TrainOutcome> {
    config.validate()?;
    run_training(logs, config, n_users, n_items, config.exposure_task_weight, &|_| 1.0)
}

/// Raw inverse-propensity weights `1 / max(counts[v] / total, clip)`.
pub fn propensity_weights(counts: &ExposureCounts, propensity_clip: f64) -> Result<Vec<f64>> {
    if !(propensity_clip > 0.0 && propensity_clip <= 1.0) {
        return Err(Error::config("propensity_clip", "must lie in (0, 1]"));
    }
    if counts.total() == 0 {
        return Err(Error::EmptyInput("exposure counts are all zero".into()));
    }
    Ok((0..counts.n_items())
        .map(|v| 1.0 / counts.frequency(v).max(propensity_clip))
        .collect())
}

/// Single-task inverse-propensity-weighted baseline. The exposure head is
/// dropped from the objective; exposed examples carry the item's propensity
/// weight, normalized to mean one over the logged records, and random
/// negatives carry weight one. Score it with gamma = 0.
pub fn train_opc_baseline(
    logs: &[ImpressionRecord],
    config: &TrainConfig,
    exposure_counts: &ExposureCounts,
    propensity_clip: f64,
    n_users: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    opc_with_users(logs, config, exposure_counts, propensity_clip, n_users, exposure_counts.n_items())
}

fn opc_with_users(
    logs: &[ImpressionRecord],
    config: &TrainConfig,
    exposure_counts: &ExposureCounts,
    propensity_clip: f64,
    n_users: usize,
    n_items: usize,
) -> Result<TrainOutcome> {
    check_logs(logs, n_users, n_items)?;
    let mut weights = propensity_weights(exposure_counts, propensity_clip)?;
    let mean: f64 = logs.iter().map(|r| weights[r.item_id]).sum::<f64>() / logs.len() as f64;
    for x in &mut weights {
        *x /= mean;
    }
    let weight = |ex: &TrainingExample| if ex.exposed { weights[ex.item_id] } else { 1.0 };
    run_training(logs, config, n_users, n_items, 0.0, &weight)
}

fn run_training<W: Fn(&TrainingExample) -> f64>(
    logs: &[ImpressionRecord],
    config: &TrainConfig,
    n_users: usize,
    n_items: usize,
    exposure_weight: f64,
    weight: &W,
) -> Result<TrainOutcome> {
    check_logs(logs, n_users, n_items)?;
    let mut params = ModelParams::init(
        n_users,
        n_items,
        config.embed_dim,
        config.exposure_embed_dim,
        config.seed,
    );
    let objective = Objective {
        exposure_weight,
        l2_reg: config.l2_reg,
    };
    let mut rng = stream(config.seed, &[0x7AB1]);
    let mut grads = Gradients::for_params(&params);
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut examples = build_training_set(logs, n_items, config.random_negatives_per_record, &mut rng)?;
        examples.shuffle(&mut rng);
        let mut sums = BatchTotals::default();
        for batch in examples.chunks(config.batch_size) {
            grads.clear();
            let t = accumulate(&params, batch, objective, weight, &mut grads);
            sums.engagement_bce += t.engagement_bce;
            sums.exposure_bce += t.exposure_bce;
            sums.weighted += t.weighted;
            if config.learning_rate > 0.0 {
                grads.apply(&mut params, config.learning_rate);
            }
        }
        let n = examples.len() as f64;
        let entry = EpochLoss {
            epoch,
            mean_engagement_bce: sums.engagement_bce / n,
            mean_exposure_bce: sums.exposure_bce / n,
            total: sums.weighted / n,
        };
        if !entry.total.is_finite() || !params.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: entry.total,
            });
        }
        trace.push(entry);
    }
    Ok(TrainOutcome { params, trace })
}

pub fn write_loss_trace(path: &Path, trace: &[EpochLoss]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "epoch,mean_engagement_bce,mean_exposure_bce,total")?;
    for e in trace {
        writeln!(
            out,
            "{},{},{},{}",
            e.epoch, e.mean_engagement_bce, e.mean_exposure_bce, e.total
        )?;
    }
    out.flush()?;
    Ok(())
}

//! Impression logging: serving policies run over the world, producing the
//! exposure records the next model is trained on.
//!
//! Log files are CSV with the header `round,user_id,item_id,label`, one row
//! per exposure, where `label` is `positive` or `negative_impression`. Files
//! following this schema can be produced elsewhere and replayed.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::stream;
use crate::model::ModelParams;
use crate::scoring::{retrieve_top_k, RetrievalIndex};
use crate::world::{Feedback, ItemId, UserId, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpressionRecord {
    pub round: u32,
    pub user_id: UserId,
    pub item_id: ItemId,
    pub label: Feedback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureCounts {
    counts: Vec<u64>,
    total: u64,
}

impl ExposureCounts {
    pub fn zeros(n_items: usize) -> Self {
        ExposureCounts {
            counts: vec![0; n_items],
            total: 0,
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        ExposureCounts { counts, total }
    }

    pub fn from_records(n_items: usize, records: &[ImpressionRecord]) -> Result<Self> {
        let mut out = ExposureCounts::zeros(n_items);
        for r in records {
            out.record(r.item_id)?;
        }
        Ok(out)
    }

    pub fn record(&mut self, item: ItemId) -> Result<()> {
        let len = self.counts.len();
        let slot = self.counts.get_mut(item).ok_or(Error::Index {
            kind: "item",
            index: item,
            len,
        })?;
        *slot += 1;
        self.total += 1;
        Ok(())
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn n_items(&self) -> usize {
        self.counts.len()
    }

    /// Empirical exposure share `counts[v] / total`; zero when nothing was logged.
    pub fn frequency(&self, item: ItemId) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.counts[item] as f64 / self.total as f64
        }
    }
}

pub fn accumulate_exposures(base: &ExposureCounts, delta: &ExposureCounts) -> Result<ExposureCounts> {
    if base.counts.len() != delta.counts.len() {
        return Err(Error::Shape(format!(
            "exposure counts cover {} and {} items",
            base.counts.len(),
            delta.counts.len()
        )));
    }
    let counts = base.counts.iter().zip(&delta.counts).map(|(a, b)| a + b).collect();
    Ok(ExposureCounts {
        counts,
        total: base.total + delta.total,
    })
}

#[derive(Debug, Clone, Copy)]
pub enum PolicyKind<'a> {
    /// Non-personalized cold start: slates drawn without replacement with
    /// weight `(item_id + 1)^-popularity_skew`.
    ZipfBootstrap,
    /// Personalized top slate from a trained model; the index carries gamma.
    ModelTopK {
        index: &'a RetrievalIndex,
        params: &'a ModelParams,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct LoggingPolicy<'a> {
    pub kind: PolicyKind<'a>,
    pub slate_size: usize,
    /// Per-slot probability of swapping in a uniformly random item that is
    /// not otherwise on the slate. Only the model policy explores.
    pub exploration_epsilon: f64,
}

impl LoggingPolicy<'_> {
    pub fn validate(&self, n_items: usize) -> Result<()> {
        if self.slate_size == 0 {
            return Err(Error::config("slate_size", "must be >= 1"));
        }
        if self.slate_size > n_items {
            return Err(Error::config(
                "slate_size",
                format!("{} exceeds catalog size {n_items}", self.slate_size),
            ));
        }
        if !(0.0..=1.0).contains(&self.exploration_epsilon) {
            return Err(Error::config("exploration_epsilon", "must lie in [0, 1]"));
        }
        if let PolicyKind::ModelTopK { index, params } = self.kind {
            if index.n_items() != n_items || params.n_items() != n_items {
                return Err(Error::Shape("serving model and world disagree on n_items".into()));
            }
        }
        Ok(())
    }
}

/// Runs one serving round for `users`. A single `u64` is drawn from `rng`;
/// each user's slate and feedback then come from an independent stream keyed
/// by that draw and the user id, so users may be processed in parallel.
pub fn run_logging_round<R: Rng + ?Sized>(
    world: &World,
    policy: &LoggingPolicy<'_>,
    users: &[UserId],
    round: u32,
    rng: &mut R,
) -> Result<(Vec<ImpressionRecord>, ExposureCounts)> {
    policy.validate(world.n_items())?;
    if users.is_empty() {
        return Err(Error::EmptyInput("logging round has no users".into()));
    }
    let round_key: u64 = rng.random();
    let zipf_weights = match policy.kind {
        PolicyKind::ZipfBootstrap => Some(zipf_log_weights(
            world.n_items(),
            world.config().popularity_skew,
        )),
        PolicyKind::ModelTopK { .. } => None,
    };

    let per_user: Vec<Vec<ImpressionRecord>> = users
        .par_iter()
        .map(|&user| {
            let mut user_rng = stream(round_key, &[user as u64]);
            let slate = match policy.kind {
                PolicyKind::ZipfBootstrap => zipf_slate(
                    zipf_weights.as_deref().unwrap(),
                    policy.slate_size,
                    &mut user_rng,
                ),
                PolicyKind::ModelTopK { index, params } => model_slate(
                    index,
                    params,
                    user,
                    policy.slate_size,
                    policy.exploration_epsilon,
                    &mut user_rng,
                )?,
            };
            slate
                .into_iter()
                .map(|item| {
                    Ok(ImpressionRecord {
                        round,
                        user_id: user,
                        item_id: item,
                        label: world.sample_feedback(user, item, &mut user_rng)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let records: Vec<ImpressionRecord> = per_user.into_iter().flatten().collect();
    let delta = ExposureCounts::from_records(world.n_items(), &records)?;
    Ok((records, delta))
}

/// `ln w_v = -skew * ln(v + 1)`.
fn zipf_log_weights(n_items: usize, skew: f64) -> Vec<f64> {
    (0..n_items).map(|v| -skew * ((v + 1) as f64).ln()).collect()
}

/// Weighted sampling without replacement via exponential keys
/// (`key = ln(u) / w`, keep the largest).
fn zipf_slate<R: Rng + ?Sized>(log_weights: &[f64], slate_size: usize, rng: &mut R) -> Vec<ItemId> {
    let mut keyed: Vec<(f64, ItemId)> = log_weights
        .iter()
        .enumerate()
        .map(|(v, &lw)| {
            let u: f64 = rng.random();
            (u.ln() * (-lw).exp(), v)
        })
        .collect();
    let by_key = |a: &(f64, ItemId), b: &(f64, ItemId)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if slate_size < keyed.len() {
        keyed.select_nth_unstable_by(slate_size - 1, by_key);
        keyed.truncate(slate_size);
    }
    keyed.sort_unstable_by(by_key);
    keyed.into_iter().map(|(_, v)| v).collect()
}

fn model_slate<R: Rng + ?Sized>(
    index: &RetrievalIndex,
    params: &ModelParams,
    user: UserId,
    slate_size: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<ItemId>> {
    let top: Vec<ItemId> = retrieve_top_k(index, params, user, slate_size, &HashSet::new())?
        .into_iter()
        .map(|s| s.item)
        .collect();
    if epsilon == 0.0 {
        return Ok(top);
    }
    let n_items = index.n_items();
    let mut taken: HashSet<ItemId> = top.iter().copied().collect();
    let mut slate = top.clone();
    for slot in slate.iter_mut() {
        if rng.random::<f64>() < epsilon && taken.len() < n_items {
            let replacement = loop {
                let v = rng.random_range(0..n_items);
                if !taken.contains(&v) {
                    break v;
                }
            };
            taken.insert(replacement);
            *slot = replacement;
        }
    }
    Ok(slate)
}

pub fn write_logs_csv(path: &Path, records: &[ImpressionRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "round,user_id,item_id,label")?;
    for r in records {
        writeln!(out, "{},{},{},{}", r.round, r.user_id, r.item_id, r.label.as_str())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a log file; errors carry the 1-based line number of the bad row.
pub fn read_logs_csv(path: &Path) -> Result<Vec<ImpressionRecord>> {
    let text = std::fs::read_to_string(path)?;
    parse_logs_csv(path, &text)
}

fn parse_logs_csv(path: &Path, text: &str) -> Result<Vec<ImpressionRecord>> {
    let err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "round,user_id,item_id,label" => {}
        Some((_, header)) => {
            return Err(err(1, format!("unexpected header {header:?}")));
        }
        None => return Err(Error::EmptyInput(format!("{} is empty", path.display()))),
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(line_no, format!("expected 4 fields, found {}", fields.len())));
        }
        let round = fields[0]
            .parse()
            .map_err(|_| err(line_no, format!("bad round {:?}", fields[0])))?;
        let user_id = fields[1]
            .parse()
            .map_err(|_| err(line_no, format!("bad user_id {:?}", fields[1])))?;
        let item_id = fields[2]
            .parse()
            .map_err(|_| err(line_no, format!("bad item_id {:?}", fields[2])))?;
        let label = Feedback::parse(fields[3])
            .ok_or_else(|| err(line_no, format!("bad label {:?}", fields[3])))?;
        records.push(ImpressionRecord {
            round,
            user_id,
            item_id,
            label,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no records", path.display())));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::scoring::build_index;
    use crate::world::{generate_world, WorldConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world(n_users: usize, n_items: usize, skew: f64) -> World {
        generate_world(&WorldConfig {
            n_users,
            n_items,
            latent_dim: 4,
            popularity_skew: skew,
            seed: 5,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn bootstrap(slate_size: usize) -> LoggingPolicy<'static> {
        LoggingPolicy {
            kind: PolicyKind::ZipfBootstrap,
            slate_size,
            exploration_epsilon: 0.0,
        }
    }

    #[test]
    fn exhaustive_slate_exposes_every_item_once() {
        let w = world(1, 12, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (records, delta) = run_logging_round(&w, &bootstrap(12), &[0], 0, &mut rng).unwrap();
        assert_eq!(records.len(), 12);
        assert!(delta.counts().iter().all(|&c| c == 1));
        assert_eq!(delta.total(), 12);
    }

    #[test]
    fn oversized_slate_is_a_config_error() {
        let w = world(1, 5, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let res = run_logging_round(&w, &bootstrap(6), &[0], 0, &mut rng);
        assert!(matches!(res, Err(Error::Config { .. })));
    }

    #[test]
    fn record_count_and_no_duplicates() {
        let w = world(30, 50, 1.2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let users: Vec<_> = (0..30).collect();
        let (records, _) = run_logging_round(&w, &bootstrap(7), &users, 3, &mut rng).unwrap();
        assert_eq!(records.len(), 30 * 7);
        for chunk in records.chunks(7) {
            let items: HashSet<_> = chunk.iter().map(|r| r.item_id).collect();
            assert_eq!(items.len(), 7);
            assert!(chunk.iter().all(|r| r.round == 3 && r.user_id == chunk[0].user_id));
        }
    }

    #[test]
    fn greedy_model_policy_serves_exact_top_k() {
        let w = world(4, 30, 1.0);
        let params = ModelParams::init(4, 30, 3, 2, 77);
        let index = build_index(&params, 0.5).unwrap();
        let policy = LoggingPolicy {
            kind: PolicyKind::ModelTopK {
                index: &index,
                params: &params,
            },
            slate_size: 6,
            exploration_epsilon: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let users = [0, 1, 2, 3];
        let (records, _) = run_logging_round(&w, &policy, &users, 1, &mut rng).unwrap();
        for (u, chunk) in users.iter().zip(records.chunks(6)) {
            let expected: Vec<_> = retrieve_top_k(&index, &params, *u, 6, &HashSet::new())
                .unwrap()
                .into_iter()
                .map(|s| s.item)
                .collect();
            let got: Vec<_> = chunk.iter().map(|r| r.item_id).collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn exploring_model_policy_keeps_slates_distinct() {
        let w = world(20, 15, 1.0);
        let params = ModelParams::init(20, 15, 3, 2, 1);
        let index = build_index(&params, 0.0).unwrap();
        let policy = LoggingPolicy {
            kind: PolicyKind::ModelTopK {
                index: &index,
                params: &params,
            },
            slate_size: 10,
            exploration_epsilon: 0.7,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let users: Vec<_> = (0..20).collect();
        let (records, _) = run_logging_round(&w, &policy, &users, 0, &mut rng).unwrap();
        for chunk in records.chunks(10) {
            let items: HashSet<_> = chunk.iter().map(|r| r.item_id).collect();
            assert_eq!(items.len(), 10);
        }
    }

    #[test]
    fn unskewed_bootstrap_is_uniform_within_three_sigma() {
        let n_items = 40;
        let w = world(50, n_items, 0.0);
        let users: Vec<_> = (0..50).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = ExposureCounts::zeros(n_items);
        for round in 0..40 {
            let (_, delta) = run_logging_round(&w, &bootstrap(5), &users, round, &mut rng).unwrap();
            counts = accumulate_exposures(&counts, &delta).unwrap();
        }
        let total = counts.total() as f64;
        let p = 1.0 / n_items as f64;
        let mean = total * p;
        let sigma = (total * p * (1.0 - p)).sqrt();
        for &c in counts.counts() {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "count {c} mean {mean}");
        }
    }

    #[test]
    fn skewed_bootstrap_concentrates_on_low_ids() {
        let w = world(200, 100, 1.5);
        let users: Vec<_> = (0..200).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, counts) = run_logging_round(&w, &bootstrap(5), &users, 0, &mut rng).unwrap();
        assert!(counts.counts()[0] > counts.counts()[50]);
        assert!(crate::metrics::exposure_gini(&counts).unwrap() > 0.0);
    }

    #[test]
    fn accumulate_fixtures() {
        let zero = ExposureCounts::zeros(2);
        let delta = ExposureCounts::from_counts(vec![1, 2]);
        assert_eq!(accumulate_exposures(&zero, &delta).unwrap(), delta);
        let sum = accumulate_exposures(&delta, &ExposureCounts::from_counts(vec![3, 4])).unwrap();
        assert_eq!(sum.counts(), &[4, 6]);
        assert_eq!(sum.total(), 10);
        let res = accumulate_exposures(&zero, &ExposureCounts::zeros(3));
        assert!(matches!(res, Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn accumulate_is_associative_and_commutative(
            a in proptest::collection::vec(0u64..1000, 6),
            b in proptest::collection::vec(0u64..1000, 6),
            c in proptest::collection::vec(0u64..1000, 6),
        ) {
            let (a, b, c) = (
                ExposureCounts::from_counts(a),
                ExposureCounts::from_counts(b),
                ExposureCounts::from_counts(c),
            );
            let left = accumulate_exposures(&accumulate_exposures(&a, &b).unwrap(), &c).unwrap();
            let right = accumulate_exposures(&a, &accumulate_exposures(&c, &b).unwrap()).unwrap();
            prop_assert_eq!(&left, &right);
            let direct: Vec<u64> = (0..6)
                .map(|i| a.counts()[i] + b.counts()[i] + c.counts()[i])
                .collect();
            prop_assert_eq!(left.counts(), &direct[..]);
            prop_assert_eq!(left.total(), direct.iter().sum::<u64>());
        }
    }

    #[test]
    fn log_csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logs.csv");
        let records = vec![
            ImpressionRecord {
                round: 0,
                user_id: 1,
                item_id: 2,
                label: Feedback::Positive,
            },
            ImpressionRecord {
                round: 1,
                user_id: 0,
                item_id: 3,
                label: Feedback::NegativeImpression,
            },
        ];
        write_logs_csv(&path, &records).unwrap();
        assert_eq!(read_logs_csv(&path).unwrap(), records);

        std::fs::write(&path, "round,user_id,item_id,label\n0,1,2,positive\n1,0,3,nega").unwrap();
        match read_logs_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, "round,user_id,item_id,label\n0,1\n").unwrap();
        assert!(matches!(read_logs_csv(&path), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&path, "").unwrap();
        assert!(matches!(read_logs_csv(&path), Err(Error::EmptyInput(_))));
        std::fs::write(&path, "round,user_id,item_id,label\n").unwrap();
        assert!(matches!(read_logs_csv(&path), Err(Error::EmptyInput(_))));
    }
}

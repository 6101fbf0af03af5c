//! Synthetic ground-truth universe: latent user and item factors, a per-item
//! appeal term, and the Bernoulli feedback model built on top of them.
//!
//! A [`World`] is the oracle every experiment is measured against. It is
//! immutable once generated and fully determined by its [`WorldConfig`].
//!
//! Snapshots are JSON documents of the form
//! `{"format": "exposure-world", "version": 1, "config": {..}, "user_factors": [..], ..}`
//! with factor matrices stored row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, sigmoid};

pub type UserId = usize;
pub type ItemId = usize;

const WORLD_FORMAT: &str = "exposure-world";
const WORLD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    /// Temperature dividing `dot + bias` before the logistic link.
    pub affinity_scale: f64,
    /// Zipf exponent of the bootstrap exposure distribution.
    pub popularity_skew: f64,
    /// Standard deviation of the per-item appeal term.
    pub quality_noise: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_users: 2_000,
            n_items: 10_000,
            latent_dim: 16,
            affinity_scale: 0.25,
            popularity_skew: 1.0,
            quality_noise: 0.25,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users < 1 {
            return Err(Error::config("world.n_users", "must be >= 1"));
        }
        if self.n_items < 2 {
            return Err(Error::config("world.n_items", "must be >= 2"));
        }
        if self.latent_dim < 1 {
            return Err(Error::config("world.latent_dim", "must be >= 1"));
        }
        if !(self.affinity_scale.is_finite() && self.affinity_scale > 0.0) {
            return Err(Error::config("world.affinity_scale", "must be a positive real"));
        }
        if !(self.popularity_skew.is_finite() && self.popularity_skew >= 0.0) {
            return Err(Error::config("world.popularity_skew", "must be a real >= 0"));
        }
        if !(self.quality_noise.is_finite() && self.quality_noise >= 0.0) {
            return Err(Error::config("world.quality_noise", "must be a real >= 0"));
        }
        Ok(())
    }
}

/// Feedback observed for one exposure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    Positive,
    NegativeImpression,
}

impl Feedback {
    pub fn is_positive(self) -> bool {
        matches!(self, Feedback::Positive)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Feedback::Positive => "positive",
            Feedback::NegativeImpression => "negative_impression",
        }
    }

    pub fn parse(s: &str) -> Option<Feedback> {
        match s {
            "positive" => Some(Feedback::Positive),
            "negative_impression" => Some(Feedback::NegativeImpression),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    config: WorldConfig,
    user_factors: Vec<f64>,
    item_factors: Vec<f64>,
    item_bias: Vec<f64>,
}

pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = 1.0 / (config.latent_dim as f64).sqrt();
    let mut draw = |n: usize, s: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * s
            })
            .collect()
    };
    let user_factors = draw(config.n_users * config.latent_dim, scale);
    let item_factors = draw(config.n_items * config.latent_dim, scale);
    let item_bias = draw(config.n_items, config.quality_noise);
    Ok(World {
        config: config.clone(),
        user_factors,
        item_factors,
        item_bias,
    })
}

impl World {
    /// Assembles a world from explicit tables, checking shapes and finiteness.
    pub fn from_parts(
        config: WorldConfig,
        user_factors: Vec<f64>,
        item_factors: Vec<f64>,
        item_bias: Vec<f64>,
    ) -> Result<World> {
        config.validate()?;
        let d = config.latent_dim;
        if user_factors.len() != config.n_users * d {
            return Err(Error::Shape(format!(
                "user_factors has {} entries, expected {}",
                user_factors.len(),
                config.n_users * d
            )));
        }
        if item_factors.len() != config.n_items * d {
            return Err(Error::Shape(format!(
                "item_factors has {} entries, expected {}",
                item_factors.len(),
                config.n_items * d
            )));
        }
        if item_bias.len() != config.n_items {
            return Err(Error::Shape(format!(
                "item_bias has {} entries, expected {}",
                item_bias.len(),
                config.n_items
            )));
        }
        let all = user_factors.iter().chain(&item_factors).chain(&item_bias);
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(Error::Shape("world tables contain non-finite entries".into()));
        }
        Ok(World {
            config,
            user_factors,
            item_factors,
            item_bias,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn n_users(&self) -> usize {
        self.config.n_users
    }

    pub fn n_items(&self) -> usize {
        self.config.n_items
    }

    pub fn user_factor(&self, user: UserId) -> Result<&[f64]> {
        self.check_user(user)?;
        let d = self.config.latent_dim;
        Ok(&self.user_factors[user * d..(user + 1) * d])
    }

    pub fn item_factor(&self, item: ItemId) -> Result<&[f64]> {
        self.check_item(item)?;
        let d = self.config.latent_dim;
        Ok(&self.item_factors[item * d..(item + 1) * d])
    }

    pub fn item_bias(&self) -> &[f64] {
        &self.item_bias
    }

    fn check_user(&self, user: UserId) -> Result<()> {
        if user >= self.config.n_users {
            return Err(Error::Index {
                kind: "user",
                index: user,
                len: self.config.n_users,
            });
        }
        Ok(())
    }

    fn check_item(&self, item: ItemId) -> Result<()> {
        if item >= self.config.n_items {
            return Err(Error::Index {
                kind: "item",
                index: item,
                len: self.config.n_items,
            });
        }
        Ok(())
    }

    /// Ground-truth probability that `user` engages with `item` when shown it.
    pub fn true_affinity(&self, user: UserId, item: ItemId) -> Result<f64> {
        let raw = dot(self.user_factor(user)?, self.item_factor(item)?) + self.item_bias[item];
        Ok(sigmoid(raw / self.config.affinity_scale))
    }

    /// Draws one Bernoulli outcome; consumes exactly one uniform from `rng`.
    pub fn sample_feedback<R: Rng + ?Sized>(
        &self,
        user: UserId,
        item: ItemId,
        rng: &mut R,
    ) -> Result<Feedback> {
        let p = self.true_affinity(user, item)?;
        let u: f64 = rng.random();
        Ok(if u < p {
            Feedback::Positive
        } else {
            Feedback::NegativeImpression
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let snapshot = WorldSnapshotRef {
            format: WORLD_FORMAT,
            version: WORLD_VERSION,
            world: self,
        };
        serde_json::to_writer(&mut out, &snapshot)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<World> {
        let snapshot: WorldSnapshot = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if snapshot.format != WORLD_FORMAT || snapshot.version != WORLD_VERSION {
            return Err(Error::Snapshot(format!(
                "expected {WORLD_FORMAT} v{WORLD_VERSION}, found {} v{}",
                snapshot.format, snapshot.version
            )));
        }
        let w = snapshot.world;
        World::from_parts(w.config, w.user_factors, w.item_factors, w.item_bias)
    }
}

#[derive(Serialize)]
struct WorldSnapshotRef<'a> {
    format: &'a str,
    version: u32,
    #[serde(flatten)]
    world: &'a World,
}

#[derive(Deserialize)]
struct WorldSnapshot {
    format: String,
    version: u32,
    #[serde(flatten)]
    world: World,
}

//! Experiment configuration: one TOML document with a section per component
//! plus top-level experiment knobs. Every field has a default, so an empty
//! file is a valid configuration.
//!
//! ```toml
//! rounds = 6
//! slate_size = 20
//! exploration_epsilon = 0.05
//! gamma_grid = [0.0, 0.25, 0.5, 0.65, 0.75, 1.0]
//! holdout_rounds = 1
//! seeds = [1, 2, 3, 4, 5]
//! top_fraction = 0.1
//! propensity_clip = 0.01
//! logging_gamma = 0.0
//!
//! [world]
//! n_users = 2000
//! n_items = 10000
//!
//! [train]
//! epochs = 30
//!
//! [scoring]
//! gamma = 0.65
//! k = 100
//!
//! [selection]
//! rule = "scalarized"
//! lambda = 1.0
//! ```
//!
//! Environment variables named `EXPOSIM__<SECTION>__<KEY>` (or
//! `EXPOSIM__<KEY>` for top-level keys) override file values. Override values
//! are read as TOML literals, falling back to a plain string, so
//! `EXPOSIM__GAMMA_GRID="[0.0, 1.0]"` and `EXPOSIM__WORLD__N_USERS=500` both
//! work.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TrainConfig;
use crate::scoring::{check_gamma, ScoringConfig};
use crate::world::WorldConfig;

pub const ENV_PREFIX: &str = "EXPOSIM__";

/// How `grid_search_gamma` picks a value from a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectionRule {
    /// Highest mean positive recall.
    MaxPositive,
    /// Highest mean positive recall among gammas with mean negative recall <= beta.
    ConstrainedPositive { beta: f64 },
    /// Highest mean `positive - lambda * negative`.
    Scalarized { lambda: f64 },
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule::Scalarized { lambda: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub rounds: usize,
    pub slate_size: usize,
    pub exploration_epsilon: f64,
    pub gamma_grid: Vec<f64>,
    pub holdout_rounds: usize,
    pub seeds: Vec<u64>,
    pub top_fraction: f64,
    /// Lower clip on item propensities for the OPC baseline.
    pub propensity_clip: f64,
    /// Gamma used by the logging model in static sweeps.
    pub logging_gamma: f64,
    pub selection: SelectionRule,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            scoring: ScoringConfig::default(),
            rounds: 6,
            slate_size: 20,
            exploration_epsilon: 0.05,
            gamma_grid: vec![0.0, 0.25, 0.5, 0.65, 0.75, 1.0],
            holdout_rounds: 1,
            seeds: vec![1, 2, 3, 4, 5],
            top_fraction: 0.1,
            propensity_clip: 0.01,
            logging_gamma: 0.0,
            selection: SelectionRule::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text without environment overrides and validates it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_env(text, std::iter::empty::<(String, String)>())
    }

    /// Parses TOML text, applies overrides from `(name, value)` pairs whose
    /// name starts with [`ENV_PREFIX`], and validates the result.
    pub fn from_toml_with_env<I, K, V>(text: &str, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| parse_error(&e))?;
        let mut overrides: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let k = k.as_ref();
                k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_ascii_lowercase(), v.as_ref().to_string()))
            })
            .collect();
        overrides.sort();
        for (key, raw) in overrides {
            apply_override(&mut table, &key, &raw)?;
        }
        let config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| parse_error(&e))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file, applying overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Full validation, as required by static sweeps.
    pub fn validate(&self) -> Result<()> {
        self.validate_common()?;
        if self.holdout_rounds == 0 {
            return Err(Error::config("holdout_rounds", "must be >= 1"));
        }
        if self.holdout_rounds >= self.rounds {
            return Err(Error::config(
                "holdout_rounds",
                format!("must be < rounds ({}), got {}", self.rounds, self.holdout_rounds),
            ));
        }
        Ok(())
    }

    /// Validation for closed-loop runs, which use a rolling one-round holdout
    /// and therefore ignore `holdout_rounds`.
    pub fn validate_for_loop(&self) -> Result<()> {
        self.validate_common()
    }

    fn validate_common(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        self.scoring.validate()?;
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be >= 1"));
        }
        if self.slate_size == 0 || self.slate_size > self.world.n_items {
            return Err(Error::config(
                "slate_size",
                format!("must lie in [1, world.n_items = {}], got {}", self.world.n_items, self.slate_size),
            ));
        }
        if self.scoring.k > self.world.n_items {
            return Err(Error::config(
                "scoring.k",
                format!("must be <= world.n_items = {}, got {}", self.world.n_items, self.scoring.k),
            ));
        }
        if !(0.0..=1.0).contains(&self.exploration_epsilon) {
            return Err(Error::config("exploration_epsilon", "must lie in [0, 1]"));
        }
        if self.gamma_grid.is_empty() {
            return Err(Error::config("gamma_grid", "must be non-empty"));
        }
        for &g in &self.gamma_grid {
            check_gamma("gamma_grid", g)?;
        }
        if self.gamma_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("gamma_grid", "must be sorted strictly ascending"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must be non-empty"));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::config("seeds", format!("duplicate seed {dup}")));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction < 1.0) {
            return Err(Error::config("top_fraction", "must lie in (0, 1)"));
        }
        if !(self.propensity_clip > 0.0 && self.propensity_clip <= 1.0) {
            return Err(Error::config("propensity_clip", "must lie in (0, 1]"));
        }
        check_gamma("logging_gamma", self.logging_gamma)?;
        match self.selection {
            SelectionRule::MaxPositive => {}
            SelectionRule::ConstrainedPositive { beta } => {
                if !(beta.is_finite() && beta >= 0.0) {
                    return Err(Error::config("selection.beta", "must be a finite real >= 0"));
                }
            }
            SelectionRule::Scalarized { lambda } => {
                if !(lambda.is_finite() && lambda >= 0.0) {
                    return Err(Error::config("selection.lambda", "must be a finite real >= 0"));
                }
            }
        }
        Ok(())
    }
}

fn parse_error(e: &toml::de::Error) -> Error {
    let reason = e.message().replace('\n', " ");
    Error::config("config", reason)
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let path: Vec<&str> = key.split("__").collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed override name"));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cursor = table;
    for part in parents {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a section")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

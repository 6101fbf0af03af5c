//! Exposure-aware retrieval scoring for recommender systems.
//!
//! A two-tower model with two heads estimates `P(engaged & exposed | user, item)`
//! and `P(exposed | user, item)`. At serving time the ranking score is
//! `eng_exp_logit - gamma * exp_logit`, which normalizes popularity out of the
//! candidate set with a single inference-time knob.
//!
//! The crate also ships the synthetic closed-loop simulator used to study the
//! method: a latent-factor [`world`], popularity-skewed and model-driven
//! [`logging`] policies, the [`model`] trainer, exact [`scoring`] and
//! retrieval, offline [`metrics`], and the [`experiment`] drivers that wire
//! them into static gamma sweeps and multi-round feedback loops.

pub mod config;
pub mod error;
pub mod experiment;
pub mod logging;
pub mod math;
pub mod metrics;
pub mod model;
pub mod scoring;
pub mod world;

pub use error::{Error, Result};

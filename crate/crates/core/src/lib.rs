//! Mobility-aware ozone exposure assessment.
//!
//! The crate fits a two-stage hierarchical spatio-temporal Gaussian process to
//! hourly monitor data ([`gp`]), predicts concentrations at cell-tower sites
//! ([`kriging`]), rebuilds device trajectories from tower hand-offs
//! ([`mobility`]) and compares exposure under dynamic and static assignment
//! ([`exposure`]). [`synth`] generates ground-truth inputs for every stage.

pub mod clock;
pub mod config;
pub mod covariates;
pub mod error;
pub mod exposure;
pub mod geo;
pub mod gp;
pub mod ingest;
pub mod kriging;
pub mod mobility;
pub mod pipeline;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};

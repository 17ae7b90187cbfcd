//! Floating content toolkit for vehicular networks.
//!
//! The crate is organised along the life cycle of a floating-content service:
//!
//! * [`roadnet`] builds road grids and rasterizes them for the convolutional model.
//! * [`mobility`] produces trajectories, contacts and per-link mobility features.
//! * [`fcsim`] runs the opportunistic replication/caching/seeding engine.
//! * [`scheme`] holds strategy arrays and the resource-cost objective.
//! * [`dataset`] generates training pairs from randomized strategies.
//! * [`learn`] hosts the convolutional surrogate, classical baselines and metrics.
//! * [`plan`] searches for cheap feasible strategies and hosts the comparison baselines.
//! * [`experiment`] wires everything into configurable, reproducible runs.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fcsim;
pub mod learn;
pub mod mobility;
pub mod plan;
pub mod rng;
pub mod roadnet;
pub mod scheme;

pub use error::{Error, Result};

//! Discrete-event simulator for adaptive content replication in mobile ad hoc
//! networks, with facility-location baselines and placement statistics.

pub mod access;
pub mod config;
pub mod engine;
pub mod error;
pub mod facility;
pub mod geometry;
pub mod mobility;
pub mod output;
pub mod replication;
pub mod rng;
pub mod scenarios;
pub mod stats;

pub use error::{Error, Result};
pub use geometry::{NodeId, Position};

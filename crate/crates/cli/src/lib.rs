//! Command-line front end for ADMM pattern pruning: configuration, checkpoints, data
//! ingestion, metrics, distribution analysis and the verification suite.

// `!(x > 0.0)` is used on purpose: unlike `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data_io;
pub mod metrics;
pub mod verify;

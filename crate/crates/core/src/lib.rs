//! Semi-structured pattern pruning for transformer encoders, optimized with ADMM.
//!
//! The crate is `no_std` (it needs `alloc`) and carries every algorithmic piece of the
//! pipeline:
//!
//! * [`matrix`] and [`autodiff`]: dense `f64` matrices and a define-by-run reverse-mode tape.
//! * [`pattern`]: block partition, per-block top-k masks, pattern pools, best-match pruning.
//! * [`admm`]: the augmented-Lagrangian penalty, Euclidean projection and dual updates.
//! * [`srste`]: the sparse-refined straight-through update used while retraining.
//! * [`model`]: a small encoder classifier with weight masking and attention-map pruning.
//! * [`optim`] and [`trainer`]: AdamW and the dense → ADMM → hard prune → retrain pipeline.
//! * [`data`]: seeded synthetic tasks, whitespace tokenization and batching.
//!
//! File formats, the command line and anything touching the filesystem live in the
//! `patprune` crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]
// `!(x > 0.0)` is used on purpose: unlike `x <= 0.0` it also rejects NaN. Index loops
// are kept where several parallel arrays are read at the same position.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod admm;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod pattern;
pub mod srste;
pub mod trainer;

mod math;

pub use error::{Error, Result};
pub use matrix::Matrix;

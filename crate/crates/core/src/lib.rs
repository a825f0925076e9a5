//! Delta decomposition compression for mixture-of-experts layers.
//!
//! Each expert weight is split into a shared base (a Fisher-weighted merge of
//! all experts) plus an expert-specific delta. Deltas are factorized by an
//! activation-whitened truncated SVD, the base is pruned column-wise in a
//! static and a per-batch dynamic phase, and the compressed layer runs
//! without ever materializing the expert matrices.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! fixture generation live in the companion `d2moe-cli` crate.

#![no_std]
// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod analysis;
pub mod error;
pub mod factorize;
pub mod grad;
pub mod linalg;
pub mod matrix;
pub mod merge;
pub mod moe;
pub mod pipeline;
pub mod prune;
pub mod runtime;

pub use error::{Error, Result, Stage};
pub use matrix::Matrix;
pub use moe::{Expert, MoELayer, MoEModel, Role};

//! Robust matrix completion by Gauss-Newton linearization with iterative
//! removal of suspected outliers.
//!
//! The solver recovers a rank-`r` matrix from a subset of its entries, a few
//! of which may be arbitrarily corrupted. Each outer iteration alternates a
//! minimal-norm least-squares update of the factor pair on the entries not
//! currently flagged, with re-estimation of the flagged set as the largest
//! residuals. The crate also ships a binary-search estimator for the
//! corruption budget, a constrained variant with spectral initialization,
//! simulation generators, and a CLI for file-based completion, Monte-Carlo
//! sweeps and runtime benchmarks.

// `!(x > 0.0)`-style guards intentionally reject NaN, which the suggested
// `x <= 0.0` rewrite would let through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Numeric kernels index parallel arrays in lockstep; zipped iterators read
// worse there.
#![allow(clippy::needless_range_loop)]
// The LSMR recurrences follow the published notation.
#![allow(clippy::assign_op_pattern)]

pub mod cli;
pub mod error;
pub mod gn_step;
pub mod harness;
pub mod io;
pub mod jacobi;
pub mod ksearch;
pub mod obs_model;
pub mod simgen;
pub mod solver;
pub mod svd;
pub mod theory;

pub use error::{Error, Result};

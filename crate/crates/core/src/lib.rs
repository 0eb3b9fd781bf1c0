//! Confusion matrices as noisy channels.
//!
//! The crate covers the full analysis path from raw stimulus–response counts
//! to rate–distortion geometry:
//!
//! - [`channels`]: row normalization, mutual information, collapse detection.
//! - [`asymmetry`]: Frobenius indices and the breadth/strength pair split.
//! - [`rd`]: Blahut–Arimoto channels, frontier sweeps and their signatures.
//! - [`fit`]: MAP inference of a latent distortion matrix from counts.
//! - [`simgen`]: the broad–weak vs. sink simulation grid.
//! - [`stats`]: rank tests, Welch t, FDR and the demeaned regressions.

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymmetry;
pub mod channels;
pub mod fit;
pub mod matrix;
pub mod rd;
pub mod simgen;
pub mod stats;

pub use matrix::SquareMatrix;

//! Federated principal component analysis for network anomaly detection.
//!
//! This crate profiles normal network traffic as a low-rank subspace and
//! flags records whose squared reconstruction error exceeds a quantile
//! threshold. The subspace can be fit three ways: centralized PCA over the
//! pooled data, or one of two consensus-ADMM federated solvers that keep
//! every client's records local — a Euclidean solver that penalizes
//! orthogonality violations (`fedpe`) and a Grassmann-manifold solver that
//! enforces orthonormality through projected gradient steps and QR
//! retraction (`fedpg`). A single-process simulator drives the federation
//! over NSL-KDD-style data with non-iid client shards and per-round client
//! sampling.
//!
//! The crate also contains a small discrete distributionally-robust
//! optimization laboratory ([`wdro`]) that numerically verifies
//! sandwich and excess-risk bounds for Wasserstein-ball robust losses on
//! finite sample spaces.
//!
//! Module map:
//!
//! * [`numerics`] — dense kernels: Frobenius products, thin QR with a
//!   positive-diagonal convention, Gram-based truncated SVD.
//! * [`grassmann`] — subspace points, tangent projection, QR retraction,
//!   principal angles.
//! * [`pca`] — centralized baseline, reconstruction errors, model files.
//! * [`federated`] — per-round client/server update rules for both solvers.
//! * [`simulator`] — federation driver: rounds, sampling, logs, checkpoints.
//! * [`dataio`] — NSL-KDD ingestion, feature selection, z-score
//!   normalization, non-iid partitioning, dataset caches.
//! * [`detection`] — thresholds, confusion metrics, ROC/AUC, per-class
//!   breakdowns.
//! * [`wdro`] — the robust-loss laboratory.
//! * [`commands`] — the operations behind the `fedpca` binary.
//! * [`synth`] — a synthetic traffic generator in the NSL-KDD layout for
//!   demos and tests.
//!
//! See the crate examples for runnable walkthroughs of each capability.

pub mod commands;
pub mod dataio;
pub mod detection;
pub mod error;
pub mod federated;
pub mod grassmann;
pub mod numerics;
pub mod pca;
pub mod rng;
pub mod simulator;
pub mod synth;
pub mod wdro;

pub use error::{Error, Result};
pub use numerics::Mat;

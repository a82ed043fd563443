//! Distributed variational Bayesian inference for Gaussian mixtures over a
//! simulated sensor network.
//!
//! Every node holds local data and a copy of the global posterior in natural
//! parameters. Nodes alternate a local VBE step with a VBM step that is either
//! solved by diffusion (stochastic natural gradient followed by neighbour
//! averaging) or by consensus ADMM in natural-parameter space. Centralized,
//! non-cooperative and one-step-averaging schedulers are included as baselines.
//!
//! Modules:
//! - [`expfam`]: Dirichlet and normal-Wishart natural parameters, log-partitions, KL divergences.
//! - [`gmm`]: per-node VBE and local VBM optimum.
//! - [`network`]: geometric graphs and combination weights.
//! - [`algorithms`]: the five schedulers and their per-round updates.
//! - [`harness`]: synthetic data, ground truth, metrics, CSV IO and experiment configs.

pub mod error;
pub mod expfam;
pub mod gmm;
pub mod network;
pub mod algorithms;
pub mod harness;
pub mod special;

#[doc(hidden)]
pub mod testutil;

pub use error::{Error, Result};

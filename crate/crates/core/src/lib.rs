//! Uncertainty-aware trajectory prediction with a mixture of experts.
//!
//! The crate is organised bottom-up:
//!
//! - [`basis`]: polynomial basis, least-squares projection and reconstruction
//!   of trajectories in the local vehicle frame.
//! - [`gmm`]: diagonal Gaussian mixtures over coefficient space, their
//!   negative log-likelihood, regularizers and sampling.
//! - [`net`]: a small fully connected network stack with batch norm,
//!   dropout, block-dropout, manual backprop and Adam.
//! - [`predictors`]: the variational (GMM) predictor and the constant
//!   turn-rate/velocity odometry expert.
//! - [`confidence`]: per-predictor error polynomials in the horizon.
//! - [`mixture`]: arbitration between experts and oracle accounting.
//! - [`eval`]: metrics, sweeps and reports.
//! - [`simgen`]: synthetic urban-driving data.
//! - [`cli`]: the `trajmix` command-line pipeline.

pub mod basis;
pub mod cli;
pub mod confidence;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod io;
pub mod mixture;
pub mod net;
pub mod predictors;
pub mod seed;
pub mod simgen;

pub use error::{Error, Result};

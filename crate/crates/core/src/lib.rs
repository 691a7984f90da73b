//! Estimation of `E g(X)` for `X ~ N(0, M)` with the Gaussian randomized
//! dimension reduction (GRDR) estimator and a standard Monte Carlo baseline.
//!
//! The estimator runs a short Markov chain on `U ~ N(0, I_d)`: each step
//! re-simulates a random prefix of `U`, the coordinates a factor matrix
//! `A` (`AAᵀ = M`) makes most important. With the PCA factor `A = Q√Λ`
//! and `q_i = √(λ_{i+1}/λ₁)`, fast eigenvalue decay buys a variance
//! reduction of order `d` at the same arithmetic cost.

pub mod analysis;
pub mod covmodel;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod factor;
pub mod fingerprint;
pub mod matrix_io;
pub mod payoffs;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};

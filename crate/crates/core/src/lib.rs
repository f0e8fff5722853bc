// index loops here usually walk several parallel arrays at once; iterator
// rewrites obscure that
#![allow(clippy::needless_range_loop)]

//! Mean-field linear-quadratic (MF-LQ) stochastic optimal control with
//! regime-switching random coefficients.
//!
//! The controlled state follows a linear SDE whose coefficients depend on a
//! finite-state Markov chain `α(·)` independent of the driving Brownian
//! motion, and whose dynamics and quadratic cost involve the conditional
//! expectations `E[X | chain]`, `E[u | chain]`. Projecting onto the chain
//! filtration splits the problem into a fluctuation part (index 1) and a
//! chain-mean part (index 2); optimal feedback is synthesized from a pair of
//! coupled backward Riccati systems, one per part, coupled through the
//! chain generator.
//!
//! Pipeline:
//!
//! 1. [`problem`] — define and validate a problem instance, split the
//!    coefficient families into the two parts.
//! 2. [`riccati`] — integrate the regime-coupled backward Riccati system,
//!    check regular/strongly-regular solvability, synthesize gains; a
//!    fixed-point iteration with frozen gains gives the same solution by
//!    monotone decrease.
//! 3. [`eta`] — solve the linear offset backward system and assemble the
//!    value function.
//! 4. [`tree`] — an exact finite probability tree (binomial Brownian branch
//!    × chain branch) serving as a discrete oracle: exact projections, exact
//!    cost and gradient, exact open-loop optimum.
//! 5. [`montecarlo`] — forward simulation of the synthesized closed loop
//!    with confidence intervals and paired strategy comparison.

pub mod chain;
pub mod error;
pub mod eta;
pub mod linalg;
pub mod montecarlo;
pub mod problem;
pub mod riccati;
pub mod tree;
pub mod verify;

pub use error::{Error, Result};

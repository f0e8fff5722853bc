//! Error types shared across the solver pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// A problem definition is structurally unusable (dimension mismatch,
    /// non-finite entry, bad grid). Soft invariant violations are reported
    /// by `problem::validate` instead.
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("time {t} outside horizon [{start}, {end}]")]
    TimeOutOfRange { t: f64, start: f64, end: f64 },

    #[error("regime {regime} out of range (chain has {num_regimes} regimes)")]
    RegimeOutOfRange { regime: usize, num_regimes: usize },

    /// One-step transition probabilities would leave [0, 1]; a clamp would
    /// bias the tree oracle, so this is a hard error.
    #[error("step {dt} too large for jump rate {max_rate} (need dt*max_rate <= 0.5)")]
    StepTooLarge { dt: f64, max_rate: f64 },

    /// The Riccati flow left the regular regime: either `R_i + D_i' P_1 D_i`
    /// lost positive semidefiniteness or the gain range condition failed.
    #[error("regularity failure for part {part} at t={t}, regime {regime}: {detail}")]
    Regularity {
        part: usize,
        t: f64,
        regime: usize,
        detail: String,
    },

    /// `||P||` exceeded the blow-up bound: the Riccati system is not
    /// solvable on the requested horizon.
    #[error("riccati blow-up at t={t}: |P| = {norm:.3e} exceeds {bound:.3e}")]
    BlowUp { t: f64, norm: f64, bound: f64 },

    /// The offset equation's range condition failed: the residual target is
    /// not in the range of `R_i + D_i' P_1 D_i`.
    #[error("offset range condition failed for part {part} at t={t}, regime {regime}: {detail}")]
    RangeCondition {
        part: usize,
        t: f64,
        regime: usize,
        detail: String,
    },

    #[error("iteration {iteration}: min eigenvalue {min_eig:.3e} below floor {floor:.3e}")]
    NotStronglyRegular {
        iteration: usize,
        min_eig: f64,
        floor: f64,
    },

    #[error("no convergence within {max} iterations")]
    MaxIterations { max: usize },

    /// Conjugate gradient found a direction of non-positive curvature: the
    /// discrete cost is not uniformly convex at this discretization.
    #[error("non-convex quadratic: curvature {curvature:.3e} along a search direction")]
    NonConvex { curvature: f64 },

    #[error("tree of {nodes} nodes exceeds budget {budget}")]
    Budget { nodes: usize, budget: usize },

    #[error("problem file parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

//! Numerical criterion for the regularity of probability laws.
//!
//! A law `mu` is tested by balancing how fast it is approximated by smooth
//! laws `mu_n` (in the dual distances `d_k`) against how fast the Sobolev-Orlicz
//! norms of their densities grow. The crate implements the ingredients and
//! runs them end to end on diffusions, a kinetic Hörmander model and the
//! stochastic heat equation.
//!
//! Module map:
//!
//! - [`gridfn`]: lattice functions, quadrature, finite differences, rate fits, RNG streams
//! - [`young_orlicz`]: Young functions, Luxembourg and weighted Sobolev-Orlicz norms
//! - [`hermite`]: Hermite functions, dyadic blocks `H_n^a`, the block kernel bound
//! - [`mollify`]: super kernels with vanishing moments and their rate lemmas
//! - [`balance`]: `d_k`, the balance functional, hypothesis `H_q`, Fourier baseline
//! - [`interp`]: K-functional harness on a weighted `l^1` pair
//! - [`ibp`]: Gaussian IBP weights, Poisson kernel, Malliavin-Thalmaier densities
//! - [`sde_lab`]: Euler simulation, frozen-Gaussian steps, regularity pipelines
//! - [`heat_lab`]: Walsh heat equation, kernel bounds, decomposition and verdict
//! - [`cli`]: configuration-driven experiment runner

pub mod balance;
pub mod cli;
pub mod gridfn;
pub mod heat_lab;
pub mod hermite;
pub mod ibp;
pub mod interp;
pub mod mollify;
pub mod sde_lab;
pub mod young_orlicz;

use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),
    #[error("integral diverges for every bracketing scale")]
    NonIntegrable,
    #[error("not a Young function: {0}")]
    NotYoung(String),
    #[error("level {0} exceeds the enumeration budget")]
    LevelTooLarge(usize),
    #[error("moment system is numerically singular (condition {0:.3e})")]
    SingularMomentSystem(f64),
    #[error("kernel support does not fit in the grid margin")]
    MarginTooSmall,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("curve too short: {0}")]
    CurveTooShort(String),
    #[error("series diverges")]
    Divergent,
    #[error("covariance is singular or not positive definite")]
    SingularCovariance,
    #[error("IBP weights missing for multi-index {0:?}")]
    WeightsMissing(Vec<usize>),
    #[error("singular point of the Poisson kernel")]
    SingularPoint,
    #[error("only {0} particles near the evaluation point")]
    TooFewParticlesNearX(usize),
    #[error("frozen diffusion matrix degenerate on {0} paths")]
    DegenerateFreeze(usize),
    #[error("explicit scheme unstable: need nt >= {0}")]
    UnstableGrid(usize),
    #[error("points too close: spacing {0:.3e}")]
    PointsTooClose(f64),
    #[error("non-positive data in rate fit")]
    NonPositiveData,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

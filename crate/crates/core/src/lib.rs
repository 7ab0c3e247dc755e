//! Incompressible flow on a moving domain.
//!
//! The domain `Omega(t)` is the image of an initial disk `Omega_0` under the
//! flow map of a prescribed divergence-free velocity field `w`. This crate
//! integrates that flow map together with its Jacobian, applies the Piola
//! transforms that carry divergence-free fields between `Omega_0` and
//! `Omega(t)`, and advances the parabolic Oseen equations
//!
//! ```text
//! u_t + (V . grad) u - Lap u + grad p = f,   div u = 0,   u|_boundary = 0
//! ```
//!
//! on the moving domain with an implicit Euler step posed between
//! consecutive mesh positions. A Taylor-Hood (P2/P1) pair discretises
//! velocity and pressure; the mesh nodes are advected by the same flow map
//! that defines the domain motion, so the discrete spaces are images of the
//! reference spaces.
//!
//! The [`verification`] module turns the identities behind this construction
//! (unit Jacobian determinant, divergence preservation, the transport
//! theorem and its `lambda` form, transform norm bounds) into numerical
//! checks, and measures the time-convergence order of the scheme against
//! manufactured solutions. The `piola` binary exposes runs, convergence
//! studies, and the verification suite on the command line.

pub mod assembly;
pub mod cli;
pub mod config;
pub mod export;
pub mod flowmap;
pub mod mesh;
pub mod timestepper;
pub mod transforms;
pub mod verification;

/// 2-vector of f64; points and velocities.
pub type Vec2 = nalgebra::Vector2<f64>;
/// 2x2 matrix of f64; Jacobians and kernels.
pub type Mat2 = nalgebra::Matrix2<f64>;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A trajectory left the hold-all disk during flow integration. The
    /// moving domain must stay inside the hold-all for all times, so this
    /// signals a mis-configured field or an over-long integration time.
    #[error("point ({x:.6}, {y:.6}) escaped the hold-all disk of radius {radius} at t = {t:.6}")]
    DomainEscape { x: f64, y: f64, radius: f64, t: f64 },

    /// Field parameters violate a constructor contract.
    #[error("invalid velocity field: {0}")]
    InvalidField(String),

    /// Mesh construction or advection failed.
    #[error("mesh error: {0}")]
    Mesh(String),

    /// An evaluation point lies outside the mesh being sampled.
    #[error("point ({x:.6}, {y:.6}) is outside the mesh at t = {t:.6}")]
    OutsideMesh { x: f64, y: f64, t: f64 },

    /// Pre-condition violation on an operation argument.
    #[error("{0}")]
    InvalidInput(String),

    /// The linear solver did not meet its residual contract.
    #[error("saddle solve failed: relative residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    Solver { residual: f64, tol: f64 },

    /// A time step failed; carries the step index and the underlying error.
    #[error("time step {step} (t = {t:.6}) failed: {source}")]
    Step {
        step: usize,
        t: f64,
        #[source]
        source: Box<Error>,
    },

    /// Configuration file problem; the message names the offending key.
    #[error("config: {0}")]
    Config(String),

    /// File output failed; carries the destination path.
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

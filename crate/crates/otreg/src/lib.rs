//! Point cloud registration built on robust (unbalanced, entropic) optimal
//! transport.
//!
//! The pipeline is organised around a single primitive: a streamed Sinkhorn
//! solver ([`sinkhorn`]) that returns dual potentials encoding a transport
//! plan between two weighted point clouds without ever materialising an
//! `N x M` matrix. The plan is summarised as a per-source-point displacement
//! field with confidence weights ([`matching`]), which is then regularised
//! in closed form (rigid/affine, [`transform`]) or by fitting a parametric
//! deformation model (spline / geodesic shooting, [`deform`]).
//!
//! Supporting modules provide geometric utilities ([`cloud`], [`kernel`]),
//! a synthetic–deformation generator with dense ground-truth flow
//! ([`synth`]), evaluation metrics ([`metrics`]), file formats ([`io`]) and
//! a stage-based registration pipeline ([`pipeline`]) exposed through the
//! `otreg` command line tool.

pub mod cloud;
pub mod dense;
pub mod deform;
pub mod fixtures;
pub mod io;
pub mod kernel;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod sinkhorn;
pub mod synth;
pub mod transform;

pub use cloud::WeightedPointCloud;
pub use kernel::KernelSpec;
pub use matching::MatchingField;
pub use sinkhorn::{DualPotentials, OTParams};

/// Errors shared by all modules of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("solver did not converge within {iters} iterations (residual {residual:.3e})")]
    NonConvergence { iters: usize, residual: f64 },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("integration blow-up: non-finite state at step {0}")]
    IntegrationBlowUp(usize),
    #[error("mismatch between dual potentials and point clouds: {0}")]
    FingerprintMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

//! Adaptive finite element solver for steady convection-dominated
//! convection-diffusion-reaction equations.
//!
//! The solver combines SUPG (streamline upwind Petrov-Galerkin) stabilization
//! with goal-oriented dual weighted residual error control. The dual problem
//! is discretized at higher polynomial order on the same mesh, and the
//! resulting cell-wise indicators drive histogram-based refinement and
//! coarsening of a 1-irregular quadrilateral mesh.

pub mod adapt;
pub mod assembly;
pub mod config;
pub mod estimator;
pub mod fespace;
pub mod mesh;
pub mod parallel;
pub mod problem;
pub mod report;

pub use adapt::{AdaptConfig, IterationRecord};
pub use estimator::ErrorIndicators;
pub use fespace::{FeSpace, QuadratureRule, ReferenceElement};
pub use mesh::{MarkSet, QuadMesh, Rect, Side};
pub use problem::{GoalKind, ProblemSpec};

/// Errors surfaced by the solver library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("degenerate goal: {0}")]
    DegenerateGoal(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Mesh construction and parsing failures.
#[derive(Debug, Error)]
pub enum MeshError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("triangle {0} is degenerate (area <= 0)")]
    DegenerateTriangle(usize),
    #[error("triangle {triangle} references vertex {vertex} out of range")]
    VertexOutOfRange { triangle: usize, vertex: usize },
    #[error("edge ({0}, {1}) is shared by more than two triangles")]
    NonManifoldEdge(usize, usize),
    #[error("boundary edge ({0}, {1}) is not on the mesh boundary")]
    NotABoundaryEdge(usize, usize),
    #[error("boundary edge ({0}, {1}) is tagged more than once")]
    DuplicateBoundaryEdge(usize, usize),
    #[error("mesh boundary edge ({0}, {1}) carries no tag")]
    UntaggedBoundaryEdge(usize, usize),
    #[error("boundary edge ({0}, {1}) is marked observed but is not an atmosphere edge")]
    ObservedNotAtmosphere(usize, usize),
    #[error("boundary edge {0} has zero length")]
    ZeroLengthEdge(usize),
    #[error("empty Gamma_d: no Dirichlet edge with positive length")]
    EmptyDirichlet,
    #[error("empty observed boundary: no observed atmosphere edge with positive length")]
    EmptyObserved,
    #[error("invalid slab parameters: {0}")]
    InvalidSlab(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("field lives on {found} but {expected} was expected")]
    SpaceMismatch { expected: String, found: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("the derivative of the power law requires delta > 0")]
    DeltaZero,
    #[error("unsupported norm {norm} on space {space}")]
    UnsupportedNorm { norm: String, space: String },
    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },
    #[error("coefficient outside the admissible box: {0}")]
    BoxViolation(String),
    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("linear solver failure: {0}")]
    LinearSolver(String),
    #[error("NaN encountered during {0}")]
    NotANumber(&'static str),
    #[error("cached state is stale: coefficients changed since the last forward/adjoint solve")]
    StaleCache,
    #[error("observation mismatch: {0}")]
    ObservationMismatch(String),
    #[error("{0}")]
    Precondition(String),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

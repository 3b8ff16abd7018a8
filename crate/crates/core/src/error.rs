use thiserror::Error;

/// Errors raised by the geometry, flow, tensor and tomography routines.
#[derive(Debug, Error)]
pub enum LensError {
    #[error("point ({0}, {1}) lies outside the (extended) chart")]
    OutOfChart(f64, f64),

    #[error("metric is not positive definite at ({0}, {1})")]
    NotSpd(f64, f64),

    #[error("entry angle {0} is tangential to the boundary")]
    TangentialEntry(f64),

    #[error("adaptive step size underflowed at t = {0}")]
    StepFailure(f64),

    #[error("exit is nearly glancing: <v, nu> = {0}")]
    NearGlancing(f64),

    #[error("tensor rank {0} is not supported by this operation")]
    RankUnsupported(usize),

    #[error("iterative solver did not converge: {iterations} iterations, relative residual {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("escape curve spans less than one decade of decay in the admissible window")]
    InsufficientDecade,

    #[error("boundary grids differ: {0}")]
    GridMismatch(String),

    #[error("metrics do not agree on the boundary tangent bundle (max deviation {0:e})")]
    BoundaryMetricMismatch(f64),

    #[error("ray at (s, theta) = ({0}, {1}) is trapped under the perturbed metric")]
    TrappedUnderPerturbation(f64, f64),

    #[error("two-point boundary problem has {0} solutions")]
    NonuniqueGeodesic(usize),

    #[error("boundary points are not near each other: d = {distance}, limit {limit}")]
    NotNearBoundary { distance: f64, limit: f64 },

    #[error("weight exponent delta = {delta} must be below half the escape rate ({half_rate})")]
    DeltaTooLarge { delta: f64, half_rate: f64 },

    #[error("tensor field is not solenoidal: |D* f| / |f| = {0:e}")]
    NotSolenoidal(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LensError> = std::result::Result<T, E>;

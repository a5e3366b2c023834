use thiserror::Error;

/// Errors raised by the models, the transcription and the solver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("geometry infeasible: {0}")]
    GeometryInfeasible(String),

    #[error("near-singular configuration: {0}")]
    NearSingular(String),

    #[error("actuator stroke {value} outside [0, {limit}]")]
    StrokeLimit { value: f64, limit: f64 },

    #[error("model inconsistency: {0}")]
    ModelInconsistency(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("fitting error: {0}")]
    Fitting(String),

    #[error("reference unreachable at t = {times:?}")]
    Reachability { times: Vec<f64> },

    #[error("efficiency map node (f_x = {force}, v_x = {velocity}): {source}")]
    MapNode {
        force: f64,
        velocity: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("solver breakdown after {iterations} iterations: {reason}")]
    SolverBreakdown {
        reason: String,
        iterations: usize,
        last_iterate: Vec<f64>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

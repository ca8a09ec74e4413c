use thiserror::Error;

/// Errors raised by mesh construction, map building, solves and drivers.
#[derive(Debug, Error)]
pub enum HddError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("usage error: {0}")]
    Usage(String),

    /// Factorization failure at a specific tree node.
    #[error("numerical error at node {node}: {msg}")]
    Numerical { node: usize, msg: String },

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("forward model failed for z = {z:?}: {source}")]
    Forward {
        z: Vec<f64>,
        #[source]
        source: Box<HddError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, HddError>;

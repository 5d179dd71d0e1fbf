use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("signature violation: metric not positive-definite at {point:?}")]
    SignatureViolation { point: Vec<f64> },

    #[error("point {point:?} outside chart domain{}", .parameter.map(|t| format!(" (exit at parameter {t:.6})")).unwrap_or_default())]
    DomainExit { point: Vec<f64>, parameter: Option<f64> },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("step size underflow at parameter {parameter:.6e} (stiff geodesic system)")]
    Stiffness { parameter: f64 },

    #[error("no unique geodesic: Newton shooting failed after {iterations} iterations (residual {residual:.3e})")]
    NoUniqueGeodesic { iterations: usize, residual: f64 },

    #[error("irregular immersion at grid index {index:?}")]
    IrregularImmersion { index: Vec<usize> },

    #[error("normal frame degenerate at grid index {index:?}")]
    FrameDegenerate { index: Vec<usize> },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("insufficient signal: only {usable} scales above the noise floor")]
    InsufficientSignal { usable: usize },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, GeoError>;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("Bessel order {order} exceeds the supported maximum {max}")]
    UnsupportedOrder { order: usize, max: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("model inconsistency: {0}")]
    ModelInconsistency(String),

    /// A jet covariance is singular and the caller did not select the
    /// degenerate (random plane wave) code path.
    #[error("degenerate jet covariance: {0}")]
    Degeneracy(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("matrix factorisation failed: {0}")]
    Singular(String),

    #[error("quadrature failed: {0}")]
    Quadrature(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error(
        "rejection sampler inefficient: {accepted} accepted out of {proposed} proposals \
         (level {level}, envelope {envelope:.3e})"
    )]
    SamplerInefficiency {
        accepted: u64,
        proposed: u64,
        level: f64,
        envelope: f64,
    },

    #[error("saddle classification: found {arcs} sign arcs on the circle of radius {epsilon}")]
    EpsilonTooLarge { arcs: usize, epsilon: f64 },

    #[error("saddle classification: both phases join around the saddle at {center:?}")]
    BothJoined { center: [f64; 2] },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("decode error: {0}")]
    Decode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidModel { field: &'static str, reason: String },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("joint {joint} at {value:.4} rad exceeds limit {limit:.4} rad")]
    JointLimit { joint: usize, value: f64, limit: f64 },

    #[error("joint {joint} must move {delta:.4} rad in {duration:.3} s, faster than {limit} rad/s")]
    JointSpeed { joint: usize, delta: f64, duration: f64, limit: f64 },

    #[error("invalid QP: {0}")]
    InvalidQp(String),

    #[error("singular KKT system")]
    SingularKkt,

    #[error("{mode} allocation infeasible: {detail}")]
    Infeasible { mode: &'static str, detail: String },

    #[error("{mode} allocation did not converge after {iterations} iterations")]
    NotConverged { mode: &'static str, iterations: usize },

    #[error("rotors {0} and {1} are coincident")]
    CoincidentRotors(usize, usize),

    #[error("no valid vectoring range for rotor {rotor}")]
    NoValidRange { rotor: usize },

    #[error("leg {leg}: target at {distance:.4} m is outside reach {reach:.4} m")]
    Unreachable { leg: usize, distance: f64, reach: f64 },

    #[error("non-finite value in {what} at tick {tick}")]
    NonFinite { tick: usize, what: &'static str },

    #[error("tick {tick}: {source}")]
    AtTick {
        tick: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidModel { field, reason: reason.into() }
    }

    pub(crate) fn at_tick(self, tick: usize) -> Self {
        match self {
            e @ Error::AtTick { .. } => e,
            e => Error::AtTick { tick, source: Box::new(e) },
        }
    }

    /// Innermost error, skipping tick annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtTick { source, .. } => source.root(),
            e => e,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

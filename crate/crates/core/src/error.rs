use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("distribution has zero total mass")]
    ZeroMass,

    #[error("invalid distribution: {0}")]
    InvalidDist(String),

    #[error("invalid vocabulary config: {0}")]
    InvalidVocab(String),

    #[error("draft probability must be positive, got {0}")]
    InvalidDraftProb(f64),

    #[error("cannot reach alpha {target}: best achievable is {achieved}")]
    CalibrationInfeasible { target: f64, achieved: f64 },

    #[error("malformed frame: {0}")]
    MalformedFrame(String),

    #[error("endpoint desync: {0}")]
    Desync(String),

    #[error("fixture parse error at line {line}: {msg}")]
    Fixture { line: usize, msg: String },

    #[error("invalid config: {field}: {msg}")]
    Config { field: &'static str, msg: String },

    #[error("transport error in round {round}: {source}")]
    Transport {
        round: u32,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: &'static str, msg: impl Into<String>) -> Self {
        Error::Config {
            field,
            msg: msg.into(),
        }
    }
}

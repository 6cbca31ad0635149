use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}:{line}:{column}: {msg}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },

    #[error("too few complete metabolites: need {needed}, have {have}")]
    TooFewComplete { needed: usize, have: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("observed cell ({metabolite}, sample {sample}) has selection probability underflow")]
    SelectionUnderflow { metabolite: String, sample: usize },

    #[error("store mismatch: {0}")]
    StoreMismatch(String),

    #[error("no latent factors detected; pass an explicit number of factors")]
    NoFactors,

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable class used by the command line front end.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "INVALID_INPUT",
            Error::Parse { .. } | Error::DuplicateId { .. } => "PARSE_ERROR",
            Error::TooFewComplete { .. } | Error::RankDeficient(_) | Error::NoFactors => {
                "DATA_ERROR"
            }
            Error::Singular(_) | Error::SelectionUnderflow { .. } => "NUMERIC_ERROR",
            Error::StoreMismatch(_) | Error::Json(_) => "STORE_ERROR",
            Error::Io(_) => "IO_ERROR",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

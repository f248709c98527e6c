use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("invalid observation {row}: {message}")]
    Observation { row: usize, message: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("unsupported design: {0}")]
    UnsupportedDesign(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid prior: {0}")]
    Prior(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown source `{0}`")]
    UnknownSource(String),

    #[error("unknown statistic `{0}`")]
    UnknownStatistic(String),

    #[error("non-finite log density during sampling (chain {chain}, iteration {iteration}): {state}")]
    NonFinite {
        chain: usize,
        iteration: usize,
        state: String,
    },

    #[error("zero acceptance for `{parameter}` over {window} proposals in chain {chain}; step size {step:.3e}")]
    StepSize {
        chain: usize,
        parameter: String,
        window: usize,
        step: f64,
    },

    #[error("insufficient draws: {0}")]
    InsufficientDraws(String),

    #[error("enumeration cap exceeded: {0}")]
    EnumerationCap(String),

    #[error("study precondition failed: {0}")]
    Study(String),
}

impl Error {
    /// Stable machine-readable kind, used in error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Layout(_) => "layout",
            Error::Observation { .. } => "observation",
            Error::Dataset(_) => "dataset",
            Error::UnsupportedDesign(_) => "unsupported_design",
            Error::Singular(_) => "singular",
            Error::Degenerate(_) => "degenerate",
            Error::Prior(_) => "prior",
            Error::Config(_) => "config",
            Error::UnknownSource(_) => "unknown_source",
            Error::UnknownStatistic(_) => "unknown_statistic",
            Error::NonFinite { .. } => "non_finite",
            Error::StepSize { .. } => "step_size",
            Error::InsufficientDraws(_) => "insufficient_draws",
            Error::EnumerationCap(_) => "enumeration_cap",
            Error::Study(_) => "study",
        }
    }
}

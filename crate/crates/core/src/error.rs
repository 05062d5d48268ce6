use thiserror::Error;

/// Errors produced by the estimation, calibration and evaluation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),

    #[error("measurement ordering violated: {0}")]
    Ordering(String),

    #[error("bias moved too far from the linearization point, repropagation required (|dbg| = {gyro:.4e}, |dba| = {accel:.4e})")]
    RepropagationRequired { gyro: f64, accel: f64 },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),

    #[error("degenerate sample spread: {0}")]
    DegenerateSpread(String),

    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(String),

    #[error("tau too large for record length: {0}")]
    TauRange(String),

    #[error("point behind camera (depth {0:.3e} m)")]
    BehindCamera(f64),

    #[error("insufficient baseline: {0}")]
    InsufficientBaseline(String),

    #[error("non-finite cost in factor {factor}: {detail}")]
    NonFiniteCost { factor: String, detail: String },

    #[error("trajectory time {t} outside [0, {duration}]")]
    TimeOutOfRange { t: f64, duration: f64 },

    #[error("empty association between trajectories")]
    EmptyAssociation,

    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("segment length {0} m exceeds total path length {1} m")]
    SegmentTooLong(f64, f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{file}:{row}: {msg}")]
    Format {
        file: String,
        row: usize,
        msg: String,
    },

    #[error("linear algebra failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors caused by bad inputs (files, configs, arguments) as opposed
    /// to numerical breakdowns.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Format { .. }
                | Error::Io(_)
                | Error::Ordering(_)
                | Error::TooFewSamples { .. }
                | Error::TauRange(_)
                | Error::SegmentTooLong(..)
                | Error::EmptyAssociation
                | Error::InsufficientExcitation(_)
                | Error::DegenerateSpread(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid parameter value (out-of-range argument, bad config field).
    #[error("parameter error: {0}")]
    Param(String),

    /// Invalid or insufficient data (empty corpus, single-class set, ...).
    #[error("data error: {0}")]
    Data(String),

    /// On-disk artifact violates its format contract.
    #[error("format error: {0}")]
    Format(String),

    /// Calibration failed to make progress; carries the loss trace.
    #[error("calibration error: {msg} (trace: {} entries)", trace.len())]
    Calibration { msg: String, trace: Vec<crate::calib::TraceRow> },

    /// Differentiation contract violated (non-scalar loss, unregistered param).
    #[error("autodiff contract error: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 for validation/config/data problems,
    /// 2 for numeric or calibration failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Calibration { .. } | Error::Contract(_) => 2,
            _ => 1,
        }
    }
}

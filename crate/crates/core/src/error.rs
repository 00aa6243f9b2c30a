use thiserror::Error;

/// Errors raised anywhere in the crate.
///
/// Each variant maps onto one of the stable CLI exit codes (see [`GqnError::exit_code`]).
#[derive(Debug, Error)]
pub enum GqnError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl GqnError {
    pub fn exit_code(&self) -> i32 {
        match self {
            GqnError::Config(_) | GqnError::Json(_) => 2,
            GqnError::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, GqnError>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::GqnError::Shape(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::GqnError::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use shape_err;

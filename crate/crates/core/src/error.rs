use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate loss: {0}")]
    DegenerateLoss(String),
    #[error("invalid box: {0}")]
    Box(String),
    #[error("point outside frame: {0}")]
    Point(String),
    #[error("linear solve failed: {0}")]
    Solve(String),
    #[error("rank error: {0}")]
    Rank(String),
    #[error("invalid cost: {0}")]
    Cost(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("config error{}: {message}", location(.key, .line))]
    Config {
        key: Option<String>,
        line: Option<usize>,
        message: String,
    },
    #[error("corrupt checkpoint at byte {offset}: {message}")]
    CorruptCheckpoint { offset: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn location(key: &Option<String>, line: &Option<usize>) -> String {
    match (key, line) {
        (Some(k), Some(l)) => format!(" (key `{k}`, line {l})"),
        (Some(k), None) => format!(" (key `{k}`)"),
        (None, Some(l)) => format!(" (line {l})"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub fn config(message: impl Into<String>) -> Self {
        Error::Config {
            key: None,
            line: None,
            message: message.into(),
        }
    }

    pub fn config_key(key: &str, message: impl Into<String>) -> Self {
        Error::Config {
            key: Some(key.to_string()),
            line: None,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;

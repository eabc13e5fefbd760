//! Crate-wide error type, categorized for process exit codes.

use std::path::PathBuf;

/// Broad failure category. The CLI maps these to exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Invalid configuration or arguments (exit 2).
    Config,
    /// Missing or malformed data files (exit 3).
    Data,
    /// Backend/transport failure after retries (exit 4).
    Gateway,
    /// Model output could not be parsed even after one repair attempt (exit 5).
    Parse,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Gateway => 4,
            ErrorClass::Parse => 5,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("data error in {path}:{line}: {message}")]
    DataAt {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("gateway error: {0}")]
    Gateway(String),

    #[error("transport failure after {attempts} attempts: {message}")]
    GatewayExhausted { attempts: u32, message: String },

    #[error("rate limit persisted after {attempts} attempts: {message}")]
    RateLimitExhausted { attempts: u32, message: String },

    #[error("backend returned an empty completion for request '{request_tag}'")]
    EmptyCompletion { request_tag: String },

    #[error("parse error for request '{request_tag}': {message}")]
    Parse { request_tag: String, message: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Data(_) | Error::DataAt { .. } | Error::Io { .. } => ErrorClass::Data,
            Error::Gateway(_)
            | Error::GatewayExhausted { .. }
            | Error::RateLimitExhausted { .. }
            | Error::EmptyCompletion { .. } => ErrorClass::Gateway,
            Error::Parse { .. } => ErrorClass::Parse,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the pipeline stage that failed, preserving the class.
    pub fn at_stage(self, stage: &str) -> Self {
        match self {
            Error::Config(m) => Error::Config(format!("[{stage}] {m}")),
            Error::Data(m) => Error::Data(format!("[{stage}] {m}")),
            Error::Gateway(m) => Error::Gateway(format!("[{stage}] {m}")),
            Error::Parse {
                request_tag,
                message,
            } => Error::Parse {
                request_tag,
                message: format!("[{stage}] {message}"),
            },
            other => {
                let message = format!("[{stage}] {other}");
                match other.class() {
                    ErrorClass::Config => Error::Config(message),
                    ErrorClass::Data => Error::Data(message),
                    ErrorClass::Gateway => Error::Gateway(message),
                    ErrorClass::Parse => Error::Parse {
                        request_tag: "unknown".into(),
                        message,
                    },
                }
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_map_to_distinct_exit_codes() {
        let codes = [
            ErrorClass::Config.exit_code(),
            ErrorClass::Data.exit_code(),
            ErrorClass::Gateway.exit_code(),
            ErrorClass::Parse.exit_code(),
        ];
        assert_eq!(codes, [2, 3, 4, 5]);
    }

    #[test]
    fn io_errors_count_as_data() {
        let err = Error::io("/tmp/x", std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        assert_eq!(err.class(), ErrorClass::Data);
    }

    #[test]
    fn stage_tagging_preserves_class() {
        let err = Error::io("/tmp/x", std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        let tagged = err.at_stage("load");
        assert_eq!(tagged.class(), ErrorClass::Data);
        assert!(tagged.to_string().contains("[load]"));
        let err = Error::Parse {
            request_tag: "multi_score".into(),
            message: "bad json".into(),
        }
        .at_stage("score");
        assert_eq!(err.class(), ErrorClass::Parse);
        assert!(err.to_string().contains("[score] bad json"));
    }
}

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A parameter or input lies outside the domain of a function.
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    /// A finite-difference perturbation would leave the valid parameter region.
    /// The caller should switch the block to one-sided (forward) differencing.
    #[error("boundary error for `{param}`: {msg}; use one-sided differencing")]
    Boundary { param: String, msg: String },

    /// An internal contract between components was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A model lacks a capability an estimator needs.
    #[error("capability missing: {0}")]
    Capability(String),

    /// An estimator met a non-finite value.
    #[error("estimator error: {msg} (theta = {theta})")]
    Estimator { msg: String, theta: String },

    /// Optimizer met a non-finite gradient.
    #[error("optimizer error on block `{block}`: {msg}")]
    Optimizer { block: String, msg: String },

    /// Configuration text could not be parsed.
    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    /// Configuration parsed but a value is invalid.
    #[error("config error at `{key}`: {msg}")]
    ConfigValue { key: String, msg: String },

    /// Input data could not be loaded.
    #[error("data error{}: {msg}", location(.row, .column))]
    Data {
        row: Option<usize>,
        column: Option<usize>,
        msg: String,
    },

    #[error("io error: {0}")]
    Io(String),
}

fn location(row: &Option<usize>, column: &Option<usize>) -> String {
    match (row, column) {
        (Some(r), Some(c)) => format!(" at row {r}, column {c}"),
        (Some(r), None) => format!(" at row {r}"),
        (None, Some(c)) => format!(" at column {c}"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn boundary(param: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Boundary {
            param: param.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigParse { .. } | Error::ConfigValue { .. } => 1,
            Error::Data { .. } => 2,
            _ => 3,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

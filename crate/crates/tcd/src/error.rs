use std::fmt;

/// Error type shared by the tensor core and the model pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two tensors could not be combined; both shapes are reported.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An argument is out of range or otherwise unusable for the named op.
    Invalid { op: &'static str, msg: String },
    /// Non-finite values appeared; `module` names the first producer.
    Numeric { module: String, msg: String },
    /// Configuration file or command-line problem.
    Config(String),
    /// Filesystem or file-format problem.
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::Invalid { op, msg } => write!(f, "{op}: {msg}"),
            Error::Numeric { module, msg } => write!(f, "numeric failure in {module}: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } => 3,
            _ => 2,
        }
    }
}

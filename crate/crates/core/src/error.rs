use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value")]
    NonFinite { op: String },

    #[error("backward: root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("cross_entropy: row {row} of {which} sums to {sum}, expected 1")]
    RowNormalization {
        which: &'static str,
        row: usize,
        sum: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated IDX file ({needed} bytes needed, {found} present)")]
    Truncated {
        path: String,
        needed: usize,
        found: usize,
    },

    #[error("IDX item count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("split {index} is empty (fraction {fraction} of {total} items)")]
    EmptySplit {
        index: usize,
        fraction: f64,
        total: usize,
    },

    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("config field `{field}`: {message}")]
    ConfigValidation { field: String, message: String },

    #[error("{what} line {line}: {message}")]
    Format {
        what: &'static str,
        line: usize,
        message: String,
    },

    #[error("numeric abort at iteration {iteration}: {quantity} is not finite")]
    NumericAbort { iteration: u64, quantity: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::NumericAbort { .. } => 2,
            _ => 1,
        }
    }
}

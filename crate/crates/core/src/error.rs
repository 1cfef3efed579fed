use thiserror::Error;

pub type Result<T> = std::result::Result<T, GrafitError>;

#[derive(Debug, Error)]
pub enum GrafitError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("query {index} has no other memory entry with label {label}")]
    IsolatedClass { index: usize, label: u32 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error("average precision undefined: no relevant items")]
    UndefinedAp,

    #[error("coarse label {0} missing from posterior")]
    MissingPosterior(u32),

    #[error("fine label {0} has no parent in the hierarchy")]
    MissingParent(u32),

    #[error("hierarchy violation: {0}")]
    Hierarchy(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("file truncated at byte offset {offset}")]
    Truncated { offset: u64 },

    #[error("malformed file at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<GrafitError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GrafitError {
    /// True for errors caused by NaN/Inf arithmetic, including wrapped ones.
    pub fn is_numeric(&self) -> bool {
        match self {
            GrafitError::NonFinite { .. } => true,
            GrafitError::AtStep { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        GrafitError::AtStep { step, source: Box::new(self) }
    }
}

// The condition is bound first so NaN comparisons fail the check without
// tripping the partial-order lint at every call site.
macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err($crate::error::GrafitError::Contract(format!($($arg)+)));
        }
    };
}

macro_rules! config_check {
    ($cond:expr, $($arg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err($crate::error::GrafitError::Config(format!($($arg)+)));
        }
    };
}

pub(crate) use config_check;
pub(crate) use contract;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("divisibility violated: {what} extent {extent} is not divisible by {divisor}")]
    Divisibility {
        what: String,
        extent: usize,
        divisor: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("softmax row {row} has every entry masked")]
    AllMasked { row: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("stability bound violated: dt = {dt} exceeds {bound}")]
    Unstable { dt: f64, bound: f64 },

    #[error("solver blow-up at step {step}: max |u| = {max_abs}")]
    BlowUp { step: usize, max_abs: f64 },

    #[error("training diverged in epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

use thiserror::Error;

/// Errors raised by the engine. Every variant carries enough context to
/// locate the offending value without a debugger.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {dim} expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        dim: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("label {label} out of range for {classes} classes (sample {sample})")]
    LabelOutOfRange {
        sample: usize,
        label: usize,
        classes: usize,
    },

    #[error("channel {channel} of conv layer {layer} was not computed")]
    Uncomputed { layer: usize, channel: usize },

    #[error("mask mismatch: {0}")]
    Mask(String),

    #[error("missing score for conv layer {layer}, channel {channel}")]
    MissingScore { layer: usize, channel: usize },

    #[error("strategy {0} needs a full-gradient profiling pass")]
    MissingProfile(&'static str),

    #[error("MAC counter mismatch: instrumented {instrumented}, analytic {analytic}")]
    CounterMismatch { instrumented: u64, analytic: u64 },

    #[error("too few samples for estimation: {got} (need at least {need})")]
    TooFewSamples { got: usize, need: usize },

    #[error("{zeros} of {total} samples are exactly zero")]
    ZeroDominated { zeros: usize, total: usize },

    #[error("epoch {epoch}: {source}")]
    Epoch {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(op: &'static str, dim: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Shape {
            op,
            dim: dim.to_string(),
            expected,
            actual,
        });
    }
    Ok(())
}

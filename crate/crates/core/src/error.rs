use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value produced at layer {layer}")]
    NonFinite { layer: usize },

    #[error("non-finite kernel value for pair ({i}, {j})")]
    NonFiniteKernel { i: usize, j: usize },

    #[error("index {index} out of range {lo}..={hi}")]
    Index { index: usize, lo: usize, hi: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate kernel: zero self-similarity at sample {0}")]
    DegenerateKernel(usize),

    #[error("kernel matrix could not be factorized (last jitter {jitter:e})")]
    SingularKernel { jitter: f64 },

    #[error("iteration limit of {iterations} reached (last estimate {estimate})")]
    IterationLimit { iterations: usize, estimate: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: {0}")]
    Length(String),

    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("network too large for brute-force oracle: {params} parameters (limit {limit})")]
    SizeGuard { params: usize, limit: usize },
}

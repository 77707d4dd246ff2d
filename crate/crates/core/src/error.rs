use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An operand has the wrong extent along one dimension.
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },
    /// An operand has the wrong rank.
    RankMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    InvalidArgument(String),
    /// Backward was seeded at a node other than the last recorded one.
    NotFinalNode { node: usize, last: usize },
    /// Malformed serialized tensor or checkpoint.
    Format(String),
    /// A checkpoint tensor does not match the network's layer layout.
    LayerMismatch { layer: String, reason: String },
    /// Training loss became NaN or infinite.
    Diverged { epoch: usize, sample: usize, loss: f32 },
    /// The attack produced a non-finite perturbation.
    NonFinitePerturbation { iteration: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                op,
                dim,
                expected,
                found,
            } => write!(
                f,
                "{op}: dimension `{dim}` mismatch (expected {expected}, found {found})"
            ),
            Error::RankMismatch {
                op,
                expected,
                found,
            } => write!(f, "{op}: expected rank {expected}, found rank {found}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NotFinalNode { node, last } => write!(
                f,
                "backward must be seeded at the final node {last}, got node {node}"
            ),
            Error::Format(msg) => write!(f, "malformed data: {msg}"),
            Error::LayerMismatch { layer, reason } => {
                write!(f, "layer `{layer}` does not match the network layout: {reason}")
            }
            Error::Diverged {
                epoch,
                sample,
                loss,
            } => write!(
                f,
                "training diverged at epoch {epoch}, sample {sample} (loss = {loss})"
            ),
            Error::NonFinitePerturbation { iteration } => write!(
                f,
                "perturbation became non-finite at iteration {iteration}; the model blew up"
            ),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

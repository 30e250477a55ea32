use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible tensor shapes; carries both shapes and the operation name.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A tensor constructor was given data whose length does not match the shape.
    BadShape { shape: Vec<usize>, len: usize },
    /// An axis or timestep index is out of range.
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    /// NaN or Inf surfaced by an operation while finite-checking is enabled.
    NonFinite { op: &'static str },
    /// Backward called on a non-scalar loss.
    NonScalarLoss { numel: usize },
    /// Backward called twice on the same recorded graph.
    GraphConsumed,
    /// Group-norm group count does not divide the channel count.
    BadGroups { groups: usize, channels: usize },
    /// Invalid noise-schedule construction parameters.
    InvalidBetaRange { lo: f64, hi: f64 },
    /// A schedule transform was applied out of contract (double shift,
    /// degenerate rescale, zero extent in the shift factor).
    ScheduleContract(String),
    /// Scene generation could not produce a valid trajectory.
    SceneGeneration(String),
    /// Configuration file or key error.
    Config(String),
    /// A module-level contract violation (missing params, wrong descriptor, ...).
    Contract(String),
    /// Training aborted; carries the diagnostic dump.
    TrainAbort(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::BadShape { shape, len } => {
                write!(f, "shape {shape:?} does not match data length {len}")
            }
            Error::IndexOutOfRange { what, index, limit } => {
                write!(f, "{what} {index} out of range (limit {limit})")
            }
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
            Error::GraphConsumed => write!(f, "backward already ran on this graph"),
            Error::BadGroups { groups, channels } => {
                write!(f, "group count {groups} does not divide {channels} channels")
            }
            Error::InvalidBetaRange { lo, hi } => {
                write!(f, "invalid beta range [{lo}, {hi}]")
            }
            Error::ScheduleContract(msg) => write!(f, "schedule: {msg}"),
            Error::SceneGeneration(msg) => write!(f, "scene generation: {msg}"),
            Error::Config(msg) => write!(f, "config: {msg}"),
            Error::Contract(msg) => write!(f, "{msg}"),
            Error::TrainAbort(msg) => write!(f, "training aborted: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

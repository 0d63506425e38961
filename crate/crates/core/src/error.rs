use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("channel mismatch: input has {input} channels, kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("spatial extent {height}x{width} must be even")]
    OddExtent { height: usize, width: usize },
    #[error("actnorm scale must be nonzero (channel {channel})")]
    ZeroScale { channel: usize },
    #[error("actnorm layer used before initialization")]
    Uninitialized,
    #[error("coupling needs at least 2 channels, got {0}")]
    TooFewChannels(usize),
    #[error("extent mismatch: {detail}")]
    ExtentMismatch { detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("ensemble must contain at least one member")]
    EmptyEnsemble,
    #[error("corpus has {0} fields, at least 6 are required")]
    CorpusTooSmall(usize),
    #[error("normalization statistics were not fitted on the training split")]
    NormProvenance,
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
}

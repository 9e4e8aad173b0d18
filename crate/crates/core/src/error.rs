use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("convolution kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; record a new forward pass")]
    BackwardTwice,
    #[error("invalid noise schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} outside [{lo}, {hi}]")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },
    #[error("timestep order violated: t={t}, t_prev={t_prev}")]
    TimestepOrder { t: usize, t_prev: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid guidance: {0}")]
    Guidance(String),
    #[error("pseudo-speaker pool is empty")]
    EmptyPool,
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("equal error rate needs both target and non-target scores")]
    SingleClass,
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("world is ill-conditioned: {0}")]
    IllConditioned(String),
}

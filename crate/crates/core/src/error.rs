use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use thiserror::Error;

use crate::sampler::Trajectory;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A configuration value is out of range or malformed.
    #[error("configuration error: {0}")]
    Config(String),
    /// Training produced a non-finite loss.
    #[error("non-finite loss {loss} at step {step} (mean timestep {t_mean})")]
    NonFiniteLoss { step: usize, t_mean: f64, loss: f64 },
    /// A sampler reached a non-finite state; the partial trajectory is kept.
    #[error("sampler diverged at step {step}")]
    Diverged {
        step: usize,
        partial: Box<Trajectory>,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

//! Dense tensors and a reverse-mode autodiff tape, sized for small MLPs.

mod adam;
pub mod gradcheck;
pub mod kernels;
mod mlp;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use mlp::{Activation, Layer, MlpParams, MlpVars};
pub use tape::{Adjoints, Gradients, Op, Tape, Var};
pub use tensor::Tensor;

#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod denoiser;
pub mod error;
pub mod forward;
pub mod gauss;
pub mod math;
pub mod ndgrad;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod train;
pub mod vae;

pub use error::{Error, Result};

//! File formats, experiment drivers, and the `vdm` command line for the
//! diffusion-model lab.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csv;
pub mod error;
pub mod experiments;
pub mod jsonl;
pub mod manifest;
pub mod svg;

pub use error::{LabError, Result};

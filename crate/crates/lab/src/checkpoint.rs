//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form and parsed exactly, so a save/load cycle is bitwise lossless.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vdm_core::denoiser::DenoiserModel;
use vdm_core::schedule::NoiseSchedule;
use vdm_core::train::ScheduleState;
use vdm_core::vae::VaeModel;

use crate::error::{self, LabError, Result};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CheckpointModel {
    Diffusion {
        denoiser: DenoiserModel,
        schedule: ScheduleState,
    },
    Vae {
        vae: VaeModel,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u64,
    pub seed: u64,
    /// The training configuration that produced the weights.
    pub train_config: serde_json::Value,
    pub model: CheckpointModel,
}

impl Checkpoint {
    pub fn new(seed: u64, train_config: serde_json::Value, model: CheckpointModel) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            seed,
            train_config,
            model,
        }
    }

    /// The diffusion model with its schedule table.
    pub fn diffusion(&self) -> Result<(&DenoiserModel, NoiseSchedule)> {
        match &self.model {
            CheckpointModel::Diffusion { denoiser, schedule } => Ok((denoiser, schedule.schedule()?)),
            CheckpointModel::Vae { .. } => Err(LabError::config("checkpoint holds a VAE, not a diffusion model")),
        }
    }

    pub fn vae(&self) -> Result<&VaeModel> {
        match &self.model {
            CheckpointModel::Vae { vae } => Ok(vae),
            CheckpointModel::Diffusion { .. } => Err(LabError::config("checkpoint holds a diffusion model, not a VAE")),
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        match &self.model {
            CheckpointModel::Diffusion { denoiser, schedule } => {
                DenoiserModel::from_parts(
                    denoiser.mlp.clone(),
                    denoiser.parameterization,
                    denoiser.data_dim,
                    denoiser.steps,
                    denoiser.time_features,
                    denoiser.cond_dim,
                )
                .map_err(|e| e.to_string())?;
                let s = schedule.schedule().map_err(|e| e.to_string())?;
                if s.steps() != denoiser.steps {
                    return Err(format!("schedule has T = {}, model expects {}", s.steps(), denoiser.steps));
                }
            }
            CheckpointModel::Vae { vae } => {
                VaeModel::from_parts(vae.encoder.clone(), vae.decoder.clone(), vae.decoder_var).map_err(|e| e.to_string())?;
            }
        }
        Ok(())
    }
}

pub fn to_json(c: &Checkpoint) -> String {
    let mut s = serde_json::to_string_pretty(c).expect("checkpoint serializes");
    s.push('\n');
    s
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    error::write(path, to_json(c))
}

/// Parses checkpoint text, distinguishing syntax errors, version
/// mismatches and structurally inconsistent content.
pub fn from_json(path: &Path, text: &str) -> Result<Checkpoint> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| LabError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let inconsistent = |message: String| LabError::Inconsistent {
        path: path.to_path_buf(),
        message,
    };
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| inconsistent("missing format_version".into()))?;
    if found != FORMAT_VERSION {
        return Err(LabError::Version {
            path: path.to_path_buf(),
            found,
            expected: FORMAT_VERSION,
        });
    }
    let c: Checkpoint = serde_json::from_value(value).map_err(|e| inconsistent(e.to_string()))?;
    c.check().map_err(inconsistent)?;
    Ok(c)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_json(path, &error::read_to_string(path)?)
}

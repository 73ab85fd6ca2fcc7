//! Run configuration: one JSON document for data, model, schedule and
//! training. Unknown keys are rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};
use wsdt::diffusion::NoiseSchedule;
use wsdt::training::{SynthSpec, TrainConfig};
use wsdt::wsdt::ModelConfig;
use wsdt::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SynthSpec,
    /// Defaults to the built-in four-step schedule.
    #[serde(default)]
    pub schedule: NoiseSchedule,
    /// Write a checkpoint every this many iterations (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: u64,
}

impl RunConfig {
    /// Desk-scale defaults, handy as a starting point for hand-written files.
    pub fn desk() -> Self {
        let model = ModelConfig::desk();
        Self {
            train: TrainConfig::for_model(&model),
            data: SynthSpec::new(1, 256, model.height, model.width, model.upscale),
            schedule: NoiseSchedule::default(),
            checkpoint_every: 500,
            model,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate(&self.model)?;
        self.data.validate()?;
        let m = &self.model;
        if (self.data.height, self.data.width, self.data.channels, self.data.upscale)
            != (m.height, m.width, m.channels, m.upscale)
        {
            return Err(Error::config(format!(
                "data geometry {}×{}×{} at {}× does not match model {}×{}×{} at {}×",
                self.data.height,
                self.data.width,
                self.data.channels,
                self.data.upscale,
                m.height,
                m.width,
                m.channels,
                m.upscale
            )));
        }
        if self.schedule.steps() != m.steps {
            return Err(Error::config(format!(
                "schedule has {} steps, model expects {}",
                self.schedule.steps(),
                m.steps
            )));
        }
        Ok(())
    }
}

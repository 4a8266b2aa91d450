use std::path::{Path, PathBuf};

use brewclip_core::encoders::{AsrConfig, EncoderConfig, PretrainConfig};
use brewclip_core::eval::ProbeConfig;
use brewclip_core::model::{LossConfig, ModelMode};
use brewclip_core::numerics::{AdamConfig, LrSchedule};
use brewclip_core::training::FitConfig;
use brewclip_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a command needs besides its file arguments. The JSON form
/// uses these field names verbatim; missing fields take the desk defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub asr: AsrConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    /// Held-out evaluation period during fine-tuning; 0 turns it off.
    pub eval_interval: u64,
    pub mode: ModelMode,
    pub datasets: Vec<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            schedule: LrSchedule { peak_lr: 2e-3, warmup_steps: 200, final_lr: 1e-5, total_steps: 3000 },
            adam: AdamConfig::default(),
            asr: AsrConfig::default(),
            pretrain: PretrainConfig::default(),
            probe: ProbeConfig::default(),
            eval_interval: 250,
            mode: ModelMode::Full,
            datasets: Vec::new(),
            output_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.asr.validate()?;
        self.pretrain.schedule().validate()
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            schedule: self.schedule,
            loss: self.loss,
            adam: self.adam,
            eval_interval: self.eval_interval,
            seed: self.seed,
        }
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// `path` as given when absolute, otherwise under `output_dir`.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.output_dir.join(path)
        }
    }
}

impl std::str::FromStr for RunConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

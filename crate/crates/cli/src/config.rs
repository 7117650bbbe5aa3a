//! Experiment configuration: a JSON manifest mirroring the library config
//! types, merged with command-line overrides.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use lumoe::device::VirtualDevice;
use lumoe::error::{Error, Result};
use lumoe::moe::ModelConfig;
use lumoe::train::TrainConfig;

/// Network and acquisition knobs; device dimensions are filled in from the
/// loaded device when building a [`ModelConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub n_decoders: usize,
    /// Physically realized pattern count (two captures per trained pattern).
    pub realized_patterns: usize,
    pub latent_dim: usize,
    pub dropout_rate: f64,
    pub softmax_noise_sigma: f64,
    pub measurement_noise_sigma: f64,
    pub measurement_scale: f64,
    pub gating_hidden: Option<Vec<usize>>,
    pub decoder_hidden: Option<Vec<usize>>,
    pub head_hidden: Option<Vec<usize>>,
    pub encoder_hidden: Option<Vec<usize>>,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            n_decoders: 8,
            realized_patterns: 8,
            latent_dim: 128,
            dropout_rate: 0.30,
            softmax_noise_sigma: 0.05,
            measurement_noise_sigma: 0.05,
            measurement_scale: 1.0,
            gating_hidden: None,
            decoder_hidden: None,
            head_hidden: None,
            encoder_hidden: None,
        }
    }
}

impl ModelParams {
    pub fn to_model_config(&self, device: &VirtualDevice) -> Result<ModelConfig> {
        if self.realized_patterns == 0 || self.realized_patterns % 2 != 0 {
            return Err(Error::invalid_argument(
                "realized_patterns must be a positive even number (two captures per trained pattern)",
            ));
        }
        let mut cfg = ModelConfig::desk(device.num_leds(), device.num_diffuse_leds());
        cfg.n_decoders = self.n_decoders;
        cfg.n_trained_patterns = self.realized_patterns / 2;
        cfg.latent_dim = self.latent_dim;
        cfg.dropout_rate = self.dropout_rate;
        cfg.softmax_noise_sigma = self.softmax_noise_sigma;
        cfg.measurement_noise_sigma = self.measurement_noise_sigma;
        cfg.measurement_scale = self.measurement_scale;
        if let Some(w) = &self.gating_hidden {
            cfg.gating_hidden = w.clone();
        }
        if let Some(w) = &self.decoder_hidden {
            cfg.decoder_hidden = w.clone();
        }
        if let Some(w) = &self.head_hidden {
            cfg.head_hidden = w.clone();
        }
        if let Some(w) = &self.encoder_hidden {
            cfg.encoder_hidden = w.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub realized_patterns: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { realized_patterns: vec![4, 8, 16], seeds: vec![1, 2, 3] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Device description path; omitted = the built-in desk device.
    pub device: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub dataset_count: usize,
    pub dataset_seed: u64,
    pub model: ModelParams,
    pub train: TrainConfig,
    pub pretrain: TrainConfig,
    pub sweep: SweepConfig,
    /// Tone-mapping exposure for SSIM and display output.
    pub exposure: f32,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            device: None,
            output_dir: PathBuf::from("out"),
            dataset_count: 50_000,
            dataset_seed: 1,
            model: ModelParams::default(),
            train: TrainConfig::default(),
            pretrain: TrainConfig::default(),
            sweep: SweepConfig::default(),
            exposure: 4.0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn device(&self) -> Result<VirtualDevice> {
        match &self.device {
            Some(p) => VirtualDevice::load(p),
            None => Ok(VirtualDevice::desk()),
        }
    }
}

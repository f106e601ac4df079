//! Run configuration, read from a flat TOML file whose keys are the field
//! names below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, StegoError};
use crate::imaging::check_image_dims;
use crate::losses::LossWeights;

/// Which perceptual image distance the trainer and reports use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerceptualKind {
    None,
    Proxy,
    /// Supplied at run time through [`crate::losses::PerceptualMetric`].
    External,
}

/// Every tunable of a run. Unknown keys in a config file are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Message length in bits.
    pub d: usize,
    /// Image size as (height, width).
    pub image_size: [usize; 2],
    pub seed: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    #[serde(flatten)]
    pub loss_weights: LossWeights,
    pub tau1: f64,
    pub tau2: f64,
    pub ema_decay: f64,
    pub max_iterations: u64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub lse_enabled: bool,
    pub transforms_enabled: bool,
    pub perceptual: PerceptualKind,

    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub noise_mean: f64,
    pub noise_sigma: f64,
    pub jpeg_quality: u8,

    pub dataset_path: PathBuf,
    /// Where training writes its checkpoints, log and manifest.
    pub checkpoint_path: PathBuf,
    /// Frozen latent codec used by training and evaluation.
    pub codec_path: PathBuf,
    /// `"reference"` or `"identity"`.
    pub codec_id: String,

    pub probe_size: usize,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub workers: usize,

    pub encoder_width: usize,
    pub decoder_width: usize,
    pub codec_width: usize,

    pub codec_iterations: u64,
    pub codec_batch_size: usize,
    pub codec_learning_rate: f64,
    pub codec_min_images: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d: 16,
            image_size: [32, 32],
            seed: 0,
            learning_rate: 8e-5,
            weight_decay: 0.01,
            loss_weights: LossWeights::default(),
            tau1: 0.90,
            tau2: 0.95,
            ema_decay: 0.99,
            max_iterations: 20_000,
            batch_size: 8,
            grad_clip: 1.0,
            lse_enabled: true,
            transforms_enabled: true,
            perceptual: PerceptualKind::Proxy,
            blur_kernel: 5,
            blur_sigma: 2.0,
            noise_mean: 0.0,
            noise_sigma: 0.2,
            jpeg_quality: 80,
            dataset_path: PathBuf::from("data/train"),
            checkpoint_path: PathBuf::from("runs/default"),
            codec_path: PathBuf::from("runs/codec.ckpt"),
            codec_id: "reference".into(),
            probe_size: 64,
            checkpoint_every: 1000,
            log_every: 100,
            workers: 1,
            encoder_width: 16,
            decoder_width: 32,
            codec_width: 32,
            codec_iterations: 10_000,
            codec_batch_size: 16,
            codec_learning_rate: 1e-3,
            codec_min_images: 1000,
        }
    }
}

impl RunConfig {
    /// Every key accepted in a config file.
    pub fn known_keys() -> Vec<String> {
        match toml::Value::try_from(RunConfig::default()) {
            Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
            _ => unreachable!("config serializes to a table"),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| StegoError::Config(format!("invalid config: {e}")))?;
        Self::from_table(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| StegoError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let known = Self::known_keys();
        if let Some(k) = table.keys().find(|k| !known.contains(k)) {
            return Err(StegoError::Usage(format!("unknown config key {k:?}")));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| StegoError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value, as used by command-line
    /// overrides and sweeps.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        if !Self::known_keys().iter().any(|k| k == key) {
            return Err(StegoError::Usage(format!("unknown config key {key:?}")));
        }
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut table = match toml::Value::try_from(self) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        };
        table.insert(key.to_string(), parsed);
        Self::from_table(table)
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.image_size[0], self.image_size[1])
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(StegoError::Config(msg));
        if self.d == 0 {
            return fail("d must be at least 1".into());
        }
        check_image_dims(self.image_size[0], self.image_size[1])?;
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0 < self.tau1 && self.tau1 <= self.tau2 && self.tau2 <= 1.0) {
            return fail(format!(
                "need 0 < tau1 <= tau2 <= 1, got tau1={} tau2={}",
                self.tau1, self.tau2
            ));
        }
        self.loss_weights.validate()?;
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail(format!("ema_decay must be in [0, 1), got {}", self.ema_decay));
        }
        if self.batch_size == 0 || self.codec_batch_size == 0 {
            return fail("batch sizes must be at least 1".into());
        }
        if !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return fail("grad_clip must be positive and weight_decay non-negative".into());
        }
        if self.blur_kernel < 3 || self.blur_kernel.is_multiple_of(2) || !(self.blur_sigma > 0.0) {
            return fail(format!(
                "blur_kernel must be odd and >= 3 with positive sigma, got {} / {}",
                self.blur_kernel, self.blur_sigma
            ));
        }
        if !(1..=100).contains(&self.jpeg_quality) {
            return fail(format!("jpeg_quality must be in [1, 100], got {}", self.jpeg_quality));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_mean.is_finite() {
            return fail("noise parameters must be finite with sigma >= 0".into());
        }
        if self.encoder_width == 0 || self.decoder_width == 0 || self.codec_width == 0 {
            return fail("network widths must be positive".into());
        }
        if self.workers == 0 || self.log_every == 0 || self.checkpoint_every == 0 {
            return fail("workers, log_every and checkpoint_every must be positive".into());
        }
        Ok(())
    }
}

//! Model and training configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::granularity::{validate_specs, GranularitySpec};
use crate::schedule::{linear_beta_schedule, schedules_from_ratios};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// Per-block scale and shift from the hidden state and step embedding.
    #[default]
    Film,
    /// Conditioning enters only through the input concatenation.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub gru_layers: usize,
    pub denoiser_width: usize,
    pub denoiser_blocks: usize,
    /// Width of the raw sinusoidal step features (must be even).
    pub step_embedding_dim: usize,
    pub conditioning: Conditioning,
    /// One encoder shared by every granularity instead of one per level.
    pub share_encoders: bool,
    /// Append hour-of-day / day-of-week features to encoder inputs.
    pub covariates: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            gru_layers: 2,
            denoiser_width: 128,
            denoiser_blocks: 4,
            step_embedding_dim: 32,
            conditioning: Conditioning::Film,
            share_encoders: false,
            covariates: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.gru_layers == 0 || self.denoiser_width == 0 {
            return Err(Error::config("model sizes must be positive"));
        }
        if self.step_embedding_dim == 0 || self.step_embedding_dim % 2 != 0 {
            return Err(Error::config("step_embedding_dim must be a positive even number"));
        }
        Ok(())
    }

    pub fn covariate_dim(&self) -> usize {
        if self.covariates {
            crate::encoder::COVARIATE_DIM
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    None,
    /// Divide each dimension by its mean magnitude over the context window.
    #[default]
    Mean,
}

/// What happens to loss terms at steps where a coarse level is still clean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Frozen-step terms are excluded (contribute zero).
    #[default]
    Mask,
    /// Every term is kept, as the training pseudocode reads literally.
    Unmasked,
}

/// How reverse-step noise is shared between granularities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSharing {
    /// One draw per diffusion step, reused by every level.
    #[default]
    Shared,
    /// A fresh draw per step and level.
    PerGranularity,
}

/// Learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero.
    Cosine,
}

impl LrSchedule {
    /// Rate for optimizer step `k` of `total` (0-based).
    pub fn rate(self, base: f64, k: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = k as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub context_length: usize,
    pub prediction_length: usize,
    pub granularities: Vec<GranularitySpec>,
    pub share_ratios: Vec<f64>,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
    pub scaling: ScalingMode,
    pub mask_mode: MaskMode,
    pub noise_sharing: NoiseSharing,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batches_per_epoch: 50,
            batch_size: 32,
            learning_rate: 1e-5,
            lr_schedule: LrSchedule::Constant,
            context_length: 24,
            prediction_length: 24,
            granularities: vec![GranularitySpec::new(1, 0.9), GranularitySpec::new(4, 0.1)],
            share_ratios: vec![1.0, 0.8],
            diffusion_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.1,
            seed: 0,
            scaling: ScalingMode::Mean,
            mask_mode: MaskMode::Mask,
            noise_sharing: NoiseSharing::Shared,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// Scaled-down defaults used by the desk-scale test suite.
    pub fn desk_scale() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            diffusion_steps: 50,
            learning_rate: 1e-3,
            ..Self::default()
        }
    }

    /// The same run with only the finest granularity.
    pub fn single_granularity(&self) -> Self {
        Self {
            granularities: vec![GranularitySpec::new(1, 1.0)],
            share_ratios: vec![1.0],
            ..self.clone()
        }
    }

    pub fn num_levels(&self) -> usize {
        self.granularities.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.granularities.iter().map(|g| g.weight).collect()
    }

    pub fn windows(&self) -> Vec<usize> {
        self.granularities.iter().map(|g| g.window).collect()
    }

    pub fn window_length(&self) -> usize {
        self.context_length + self.prediction_length
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_length == 0 || self.prediction_length == 0 {
            return Err(Error::config("context and prediction lengths must be at least 1"));
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(Error::config("batch size and batches per epoch must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        validate_specs(&self.granularities)?;
        if self.share_ratios.len() != self.granularities.len() {
            return Err(Error::config(format!(
                "{} share ratios for {} granularities",
                self.share_ratios.len(),
                self.granularities.len()
            )));
        }
        for pair in self.share_ratios.windows(2) {
            if pair[1] >= pair[0] {
                return Err(Error::config(
                    "share ratios must strictly decrease as granularity coarsens",
                ));
            }
        }
        let base = linear_beta_schedule(self.diffusion_steps, self.beta_start, self.beta_end)
            .map_err(|e| Error::config(e.to_string()))?;
        schedules_from_ratios(&base, &self.share_ratios)?;
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::desk_scale().validate().unwrap();
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_weights_and_ratios() {
        let mut c = TrainConfig::default();
        c.granularities[1].weight = 0.5;
        assert!(c.validate().is_err());

        let mut c = TrainConfig::default();
        c.share_ratios = vec![1.0, 1.0];
        assert!(c.validate().is_err());

        // distinct ratios that round to the same start step
        let mut c = TrainConfig::default();
        c.diffusion_steps = 10;
        c.share_ratios = vec![1.0, 0.99];
        assert!(c.validate().is_err());

        let mut c = TrainConfig::default();
        c.context_length = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "epoch": 4}"#);
        assert!(err.is_err());
        let ok: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(ok.epochs, 3);
        assert_eq!(ok.diffusion_steps, 100);
    }

    #[test]
    fn odd_embedding_rejected() {
        let m = ModelConfig {
            step_embedding_dim: 7,
            ..ModelConfig::default()
        };
        assert!(m.validate().is_err());
    }
}

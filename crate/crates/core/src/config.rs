//! Model and run configuration.

use serde::{Deserialize, Serialize};

use crate::data::{Modality, ALL_MODALITIES};
use crate::error::{Error, Result};
use crate::fusion::FusionKind;

fn default_d_model() -> usize {
    1024
}
fn default_heads() -> usize {
    8
}
fn default_d_ff() -> usize {
    1024
}
fn default_layers() -> usize {
    1
}
fn default_kernel() -> usize {
    1
}
fn default_dropout() -> f64 {
    0.5
}
fn default_temperature() -> f64 {
    1.0
}
fn default_gamma() -> f64 {
    1.0
}
fn default_max_len() -> usize {
    256
}
fn default_ln_eps() -> f64 {
    1e-5
}
fn default_modalities() -> Vec<Modality> {
    ALL_MODALITIES.to_vec()
}
fn default_lr() -> f64 {
    1e-4
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_batch_size() -> usize {
    16
}
fn default_epochs() -> usize {
    50
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_patience() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Common hidden size shared by all transformers and fusion stages.
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    /// Transformer layers per modality pair.
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Convolution kernel sizes per modality (odd).
    #[serde(default = "default_kernel")]
    pub kernel_text: usize,
    #[serde(default = "default_kernel")]
    pub kernel_audio: usize,
    #[serde(default = "default_kernel")]
    pub kernel_visual: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Distillation softening temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_gamma")]
    pub gamma_task: f64,
    #[serde(default = "default_gamma")]
    pub gamma_ce: f64,
    #[serde(default = "default_gamma")]
    pub gamma_kl: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_modalities")]
    pub modalities: Vec<Modality>,
    #[serde(default)]
    pub fusion: FusionKind,
    #[serde(default)]
    pub no_positional: bool,
    #[serde(default)]
    pub no_speaker: bool,
    #[serde(default)]
    pub no_intra: bool,
    #[serde(default)]
    pub no_inter: bool,
    /// Drop the student cross-entropy term (gamma_ce treated as 0).
    #[serde(default)]
    pub no_student_ce: bool,
    /// Drop the student KL term (gamma_kl treated as 0).
    #[serde(default)]
    pub no_student_kl: bool,
    /// Let the KL term backpropagate into the teacher branch.
    #[serde(default)]
    pub kl_backprop_teacher: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl ModelConfig {
    /// Present modalities in canonical t, a, v order, deduplicated.
    pub fn canonical_modalities(&self) -> Vec<Modality> {
        ALL_MODALITIES
            .iter()
            .copied()
            .filter(|m| self.modalities.contains(m))
            .collect()
    }

    pub fn kernel(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.kernel_text,
            Modality::Audio => self.kernel_audio,
            Modality::Visual => self.kernel_visual,
        }
    }

    /// Effective loss weights after the ablation switches.
    pub fn loss_weights(&self) -> crate::heads::LossWeights {
        crate::heads::LossWeights {
            task: self.gamma_task,
            ce: if self.no_student_ce { 0.0 } else { self.gamma_ce },
            kl: if self.no_student_kl { 0.0 } else { self.gamma_kl },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_model {} must be even and positive",
                self.d_model
            )));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        for m in ALL_MODALITIES {
            if self.kernel(m).is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "kernel size {} for {m} must be odd",
                    self.kernel(m)
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.canonical_modalities().is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    /// Dataset directory (header.json / index.json / data.bin).
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of conversations held out for early stopping.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} not in [0, 1)",
                self.val_fraction
            )));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("lr and weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

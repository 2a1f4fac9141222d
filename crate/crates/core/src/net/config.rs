//! Model configuration and ablation switches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{AdamConfig, LEAKY_SLOPE};
use crate::latent::LevelSpec;

/// Structural ablations of the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Fine decoders regress the SDF directly instead of a residual.
    pub no_residual: bool,
    /// Fine decoders see zeros in place of the upsampled global code.
    pub no_global_connection: bool,
    /// Latent grid dropout disabled during training.
    pub no_dropout: bool,
    /// Keep only level 0.
    pub global_only: bool,
    /// Keep only the finest level.
    pub local_only: bool,
    /// Completion without the occluded-residual penalty.
    pub no_consistency: bool,
}

impl Ablations {
    /// Rejects combinations that do not describe a meaningful model.
    pub fn validate(&self) -> Result<()> {
        let single_level = self.global_only || self.local_only;
        if self.global_only && self.local_only {
            return Err(Error::Spec("global_only and local_only are mutually exclusive".into()));
        }
        if single_level && self.no_residual {
            return Err(Error::Spec("no_residual needs more than one level".into()));
        }
        if single_level && self.no_global_connection {
            return Err(Error::Spec("no_global_connection needs more than one level".into()));
        }
        if self.global_only && self.no_dropout {
            return Err(Error::Spec("global_only has no droppable levels".into()));
        }
        Ok(())
    }
}

/// How per-level decoder outputs combine into level aggregates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// `S_n = S_{n-1} + out_n`.
    Residual,
    /// `S_n = out_n`.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub levels: LevelSpec,
    pub input_res: usize,
    /// Output channels of the stride-2 encoder trunk.
    pub encoder_channels: Vec<usize>,
    /// Hidden widths of every decoder MLP.
    pub decoder_hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Draws per point set (uniform and near-surface) per shape per step.
    pub points_per_set: usize,
    pub iterations: usize,
    pub seed: u64,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: LevelSpec::desk(),
            input_res: 32,
            encoder_channels: vec![16, 32, 64],
            decoder_hidden: vec![128, 128, 64],
            leaky_slope: LEAKY_SLOPE,
            dropout: 0.5,
            adam: AdamConfig::default(),
            batch_size: 8,
            points_per_set: 4096,
            iterations: 5000,
            seed: 0,
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    /// Level layout after applying `global_only` / `local_only`.
    pub fn effective_levels(&self) -> LevelSpec {
        if self.ablations.global_only {
            self.levels.global_only()
        } else if self.ablations.local_only {
            self.levels.local_only()
        } else {
            self.levels.clone()
        }
    }

    pub fn effective_dropout(&self) -> f64 {
        if self.ablations.no_dropout {
            0.0
        } else {
            self.dropout
        }
    }

    pub fn aggregation(&self) -> Aggregation {
        if self.ablations.no_residual {
            Aggregation::Direct
        } else {
            Aggregation::Residual
        }
    }

    pub fn uses_global_connection(&self) -> bool {
        !self.ablations.no_global_connection && self.effective_levels().has_global_code()
    }

    /// Resolution of the encoder feature grid.
    pub fn feature_res(&self) -> usize {
        self.input_res >> self.encoder_channels.len()
    }

    /// Decoder input width at level `n`.
    pub fn decoder_input_width(&self, n: usize) -> usize {
        let spec = self.effective_levels();
        let c = spec.levels()[n].channels;
        if n == 0 {
            c + 3
        } else {
            2 * c
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ablations.validate()?;
        let spec = self.effective_levels();
        if !self.input_res.is_power_of_two() || self.input_res < 2 {
            return Err(Error::Spec(format!("input resolution {} must be a power of two >= 2", self.input_res)));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Spec("encoder needs at least one positive channel count".into()));
        }
        if self.feature_res() == 0 {
            return Err(Error::Spec(format!(
                "{} stride-2 encoder layers are too many for {}³ input",
                self.encoder_channels.len(),
                self.input_res
            )));
        }
        if let Some(l) = spec.levels().iter().find(|l| !l.res.is_power_of_two()) {
            return Err(Error::Spec(format!("level resolution {} is not a power of two", l.res)));
        }
        if self.decoder_hidden.is_empty() || self.decoder_hidden.contains(&0) {
            return Err(Error::Spec("decoder needs at least one positive hidden width".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Spec(format!("dropout rate {} outside [0, 1]", self.dropout)));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Spec(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        if self.batch_size == 0 || self.points_per_set == 0 {
            return Err(Error::Spec("batch size and points per set must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Spec(format!("learning rate {} must be positive", self.adam.lr)));
        }
        Ok(())
    }
}

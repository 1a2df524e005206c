//! Model assembly: stand-in sparse encoder, coarse-to-fine upsampler,
//! per-scale neighborhood decoders, the multi-scale loss, and the training
//! and evaluation loops.

mod eval;
mod net;
mod train;

pub use eval::{evaluate, EvalReport, ScaleMetrics};
pub use net::{
    init_params, init_prior_bias, input_features, run_forward, ForwardRun, INPUT_CHANNELS,
};
pub use train::{
    prepare_scene, train_step, PipelineConfig, SceneInstance, StepRecord, TrainSettings,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neighborhood::NeighborhoodSpec;

/// Pointwise nonlinearity used throughout the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

/// Architecture hyperparameters.
///
/// The decoder geometry is tied to the reconstruction neighborhood: `m`
/// expansion layers of reach `e` give an active set of side `2*m*e + 1`,
/// which must equal the neighborhood side `n_s` at every scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Scale count S.
    pub num_scales: usize,
    /// Feature width per scale, finest first.
    pub channels: Vec<usize>,
    /// Submanifold blocks per encoder scale.
    pub encoder_blocks: usize,
    /// Expansion layers per decoder (m).
    pub decoder_layers: usize,
    /// Per-layer expansion reach (e). The paper's kernel-size alias is
    /// `k = e + 1`.
    pub decoder_reach: i32,
    /// Submanifold head layers per decoder (c); zero means the expansion
    /// stack predicts occupancy directly.
    pub head_depth: usize,
    pub activation: Activation,
    /// Initialize each decoder's output bias to the logit of the positive
    /// fraction observed on the first batch.
    pub prior_bias: bool,
    /// Relative per-scale loss weights; uniform weights reproduce the plain
    /// average over scales.
    pub loss_weights: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_scales: 4,
            channels: vec![32, 64, 128, 256],
            encoder_blocks: 2,
            decoder_layers: 2,
            decoder_reach: 2,
            head_depth: 1,
            activation: Activation::Relu,
            prior_bias: true,
            loss_weights: vec![1.0; 4],
        }
    }
}

impl ModelConfig {
    /// Active-set side length produced by the decoder stack.
    pub fn decoder_side(&self) -> i32 {
        2 * self.decoder_layers as i32 * self.decoder_reach + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scales < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_scales {} must be at least 2",
                self.num_scales
            )));
        }
        if self.channels.len() != self.num_scales {
            return Err(Error::InvalidConfig(format!(
                "{} channel widths for {} scales",
                self.channels.len(),
                self.num_scales
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::InvalidConfig("channel widths must be positive".into()));
        }
        if self.encoder_blocks == 0 {
            return Err(Error::InvalidConfig("encoder needs at least one block per scale".into()));
        }
        if self.decoder_layers == 0 || self.decoder_reach < 1 {
            return Err(Error::InvalidConfig(
                "decoder needs at least one expansion layer of reach >= 1".into(),
            ));
        }
        if self.loss_weights.len() != self.num_scales {
            return Err(Error::InvalidConfig(format!(
                "{} loss weights for {} scales",
                self.loss_weights.len(),
                self.num_scales
            )));
        }
        if self.loss_weights.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
            return Err(Error::InvalidConfig("loss weights must be positive".into()));
        }
        Ok(())
    }

    /// Check the decoder geometry covers the neighborhood at every scale.
    pub fn validate_against(&self, spec: &NeighborhoodSpec) -> Result<()> {
        self.validate()?;
        if spec.num_scales() != self.num_scales {
            return Err(Error::InvalidConfig(format!(
                "neighborhood spec has {} scales, model has {}",
                spec.num_scales(),
                self.num_scales
            )));
        }
        let side = self.decoder_side();
        for s in 0..self.num_scales {
            let n = spec.side(s)? as i32;
            if side != n {
                return Err(Error::InvalidConfig(format!(
                    "decoder side 2*{}*{}+1 = {side} does not match neighborhood n = {n} at scale {s}",
                    self.decoder_layers, self.decoder_reach
                )));
            }
        }
        Ok(())
    }

    /// Normalized per-scale weights implementing the average over scales.
    pub fn normalized_loss_weights(&self) -> Vec<f64> {
        let total: f64 = self.loss_weights.iter().sum();
        self.loss_weights.iter().map(|w| w / total).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_matches_n9() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.decoder_side(), 9);
        let spec = NeighborhoodSpec::uniform(9, 4).unwrap();
        cfg.validate_against(&spec).unwrap();
    }

    #[test]
    fn mismatched_neighborhood_rejected() {
        let cfg = ModelConfig::default();
        let spec = NeighborhoodSpec::uniform(5, 4).unwrap();
        assert!(cfg.validate_against(&spec).is_err());
    }

    #[test]
    fn decoder_side_table() {
        // (m, e) -> n, matching k = e + 1 aliases m1k2, m2k2, m2k3.
        for (m, e, n) in [(1usize, 1, 3), (2, 1, 5), (2, 2, 9)] {
            let cfg = ModelConfig {
                decoder_layers: m,
                decoder_reach: e,
                ..ModelConfig::default()
            };
            assert_eq!(cfg.decoder_side(), n);
        }
    }
}

//! Scene preprocessing and the optimization step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_pyramid, clip_range, voxelize, PointCloud, SparseOccupancy, VoxelPyramid};
use crate::masking::{encoder_input, generate, MaskAssignment, MaskingConfig};
use crate::model::net::run_forward;
use crate::model::ModelConfig;
use crate::neighborhood::{build_targets, NeighborhoodSpec, TargetSet};
use crate::sparsenn::{adam_step, AdamHyper, AdamState, GradStore, ParamStore, Scalar};

/// Geometry-side settings shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub base_size: f64,
    pub origin: [f64; 3],
    pub num_scales: usize,
    /// Optional half-open crop applied before voxelization.
    pub clip_min: Option<[f64; 3]>,
    pub clip_max: Option<[f64; 3]>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            base_size: 0.05,
            origin: [0.0; 3],
            num_scales: 4,
            clip_min: Some([-51.2, -51.2, -5.0]),
            clip_max: Some([51.2, 51.2, 3.0]),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_size <= 0.0 || !self.base_size.is_finite() {
            return Err(Error::InvalidConfig(format!("base_size {} must be positive", self.base_size)));
        }
        if self.num_scales < 1 {
            return Err(Error::InvalidConfig("num_scales must be at least 1".into()));
        }
        if self.clip_min.is_some() != self.clip_max.is_some() {
            return Err(Error::InvalidConfig("clip_min and clip_max must be set together".into()));
        }
        Ok(())
    }
}

/// A fully preprocessed scene, ready for the forward pass.
#[derive(Debug, Clone)]
pub struct SceneInstance {
    pub pyramid: VoxelPyramid,
    pub assignment: MaskAssignment,
    pub visible: SparseOccupancy,
    pub targets: TargetSet,
}

/// Voxelize, build the pyramid, mask, and build targets for one cloud.
pub fn prepare_scene(
    cloud: &PointCloud,
    pipeline: &PipelineConfig,
    masking: &MaskingConfig,
    spec: &NeighborhoodSpec,
) -> Result<SceneInstance> {
    pipeline.validate()?;
    let clipped;
    let cloud = match (pipeline.clip_min, pipeline.clip_max) {
        (Some(min), Some(max)) => {
            clipped = clip_range(cloud, min, max)?;
            &clipped
        }
        _ => cloud,
    };
    let voxelization = voxelize(cloud, pipeline.base_size, pipeline.origin)?;
    let pyramid = build_pyramid(voxelization.occupancy, pipeline.num_scales, pipeline.origin)?;
    let assignment = generate(&pyramid, masking)?;
    let visible = encoder_input(&assignment, &pyramid)?;
    let targets = build_targets(&assignment, &pyramid, spec)?;
    Ok(SceneInstance { pyramid, assignment, visible, targets })
}

/// Optimization settings for a pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub hyper: AdamHyper,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr: f64,
    pub batch_size: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            hyper: AdamHyper::default(),
            warmup_steps: 0,
            total_steps: 1,
            min_lr: 0.0,
            batch_size: 8,
        }
    }
}

/// What one training step produced.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub scale_losses: Vec<f64>,
}

/// Forward/backward over a batch of prepared scenes, then one AdamW update.
///
/// Scene losses and gradients are averaged in batch order; the learning rate
/// follows the cosine-with-warmup schedule at the optimizer's step counter.
pub fn train_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    cfg: &ModelConfig,
    settings: &TrainSettings,
    batch: &[&SceneInstance],
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch is empty"));
    }
    let inv_batch = 1.0 / batch.len() as f64;
    let mut total = 0.0f64;
    let mut scale_totals = vec![0.0f64; cfg.num_scales];
    let mut grads: Option<GradStore<T>> = None;

    for scene in batch {
        let run = run_forward(params, cfg, &scene.visible, &scene.assignment, &scene.targets)?;
        total += run.loss_value().to_f64();
        for (s, v) in run.scale_loss_values().into_iter().enumerate() {
            scale_totals[s] += v.to_f64();
        }
        let g = run.backward()?;
        match &mut grads {
            Some(acc) => acc.accumulate(&g)?,
            None => grads = Some(g),
        }
    }

    let mut grads = grads.expect("non-empty batch");
    grads.scale(T::from_f64(inv_batch));

    let step = state.step;
    let lr = crate::sparsenn::cosine_warmup_lr(
        settings.hyper.lr,
        step,
        settings.warmup_steps,
        settings.total_steps,
        settings.min_lr,
    );
    adam_step(params, &grads, state, &settings.hyper, lr)?;

    Ok(StepRecord {
        step,
        lr,
        loss: total * inv_batch,
        scale_losses: scale_totals.iter().map(|v| v * inv_batch).collect(),
    })
}

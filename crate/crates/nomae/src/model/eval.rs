//! Pretext-domain evaluation: occupancy precision/recall/IoU over the target
//! neighborhoods, plus recovered/lost accounting.

use std::io::Write;

use crate::error::Result;
use crate::model::net::run_forward;
use crate::model::train::SceneInstance;
use crate::model::ModelConfig;
use crate::neighborhood::recovered_lost_accounting;
use crate::sparsenn::{ParamStore, Scalar};

/// Metrics for one scale, aggregated over the evaluated scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleMetrics {
    pub scale: usize,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub loss: f64,
    pub targets: usize,
    pub positives: usize,
    pub recovered: usize,
    pub lost: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<ScaleMetrics>,
    pub mean_loss: f64,
}

impl EvalReport {
    pub fn to_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "scale,precision,recall,iou,loss,targets,positives,recovered,lost")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
                r.scale, r.precision, r.recall, r.iou, r.loss, r.targets, r.positives, r.recovered, r.lost
            )?;
        }
        Ok(())
    }
}

fn safe_div(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Run the forward pass on each scene and score thresholded occupancy
/// (logit > 0, i.e. probability 0.5) against the target labels. Metrics are
/// computed over the target neighborhoods only; visible voxels are excluded
/// by construction.
pub fn evaluate<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    scenes: &[&SceneInstance],
) -> Result<EvalReport> {
    let mut tp = vec![0usize; cfg.num_scales];
    let mut fp = vec![0usize; cfg.num_scales];
    let mut fn_ = vec![0usize; cfg.num_scales];
    let mut loss_sum = vec![0.0f64; cfg.num_scales];
    let mut targets_total = vec![0usize; cfg.num_scales];
    let mut positives = vec![0usize; cfg.num_scales];
    let mut recovered = vec![0usize; cfg.num_scales];
    let mut lost = vec![0usize; cfg.num_scales];
    let mut total_loss = 0.0f64;

    for scene in scenes {
        let run = run_forward(params, cfg, &scene.visible, &scene.assignment, &scene.targets)?;
        total_loss += run.loss_value().to_f64();
        for (s, v) in run.scale_loss_values().into_iter().enumerate() {
            loss_sum[s] += v.to_f64();
        }
        for s in 0..cfg.num_scales {
            let logits = run.logits_map(s)?;
            let st = scene.targets.scale(s)?;
            targets_total[s] += st.len();
            for (row, &label) in st.labels.iter().enumerate() {
                let predicted = logits.features()[(row, 0)] > T::zero();
                if label {
                    positives[s] += 1;
                    if predicted {
                        tp[s] += 1;
                    } else {
                        fn_[s] += 1;
                    }
                } else if predicted {
                    fp[s] += 1;
                }
            }
        }
        for row in recovered_lost_accounting(&scene.assignment, &scene.targets)? {
            recovered[row.scale] += row.recovered;
            lost[row.scale] += row.lost;
        }
    }

    let n = scenes.len().max(1) as f64;
    let rows = (0..cfg.num_scales)
        .map(|s| ScaleMetrics {
            scale: s,
            precision: safe_div(tp[s], tp[s] + fp[s]),
            recall: safe_div(tp[s], tp[s] + fn_[s]),
            iou: safe_div(tp[s], tp[s] + fp[s] + fn_[s]),
            loss: loss_sum[s] / n,
            targets: targets_total[s],
            positives: positives[s],
            recovered: recovered[s],
            lost: lost[s],
        })
        .collect();

    Ok(EvalReport { rows, mean_loss: total_loss / n })
}

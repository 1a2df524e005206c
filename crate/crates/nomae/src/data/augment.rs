//! Point-cloud augmentation: rotate, scale, flip, jitter, in that order.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::geometry::{Point3, PointCloud};

/// Augmentation parameters, each stage independently toggleable.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub rotate: bool,
    /// Angle drawn uniformly from `[-rotate_range, rotate_range] * pi`.
    pub rotate_range: f64,
    pub scale: bool,
    pub scale_range: (f64, f64),
    pub flip: bool,
    /// Each horizontal axis is mirrored independently with this probability.
    pub flip_prob: f64,
    pub jitter: bool,
    /// Per-point Gaussian sigma in meters, clipped to `jitter_clip`.
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate: true,
            rotate_range: 1.0,
            scale: true,
            scale_range: (0.9, 1.1),
            flip: true,
            flip_prob: 0.5,
            jitter: true,
            jitter_sigma: 0.005,
            jitter_clip: 0.02,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { rotate: false, scale: false, flip: false, jitter: false, ..Self::default() }
    }
}

/// Apply rotate-z, uniform scale, axis flips, and clipped Gaussian jitter.
/// Point order and count are preserved; a fixed seed fixes every draw.
pub fn augment(cloud: &PointCloud, cfg: &AugmentConfig, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = cloud.points.clone();

    if cfg.rotate {
        let angle = rng.gen_range(-cfg.rotate_range..=cfg.rotate_range) * std::f64::consts::PI;
        rotate_z(&mut points, angle);
    }
    if cfg.scale {
        let factor = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
        for p in &mut points {
            p.x *= factor;
            p.y *= factor;
            p.z *= factor;
        }
    }
    if cfg.flip {
        let flip_x = rng.gen_bool(cfg.flip_prob);
        let flip_y = rng.gen_bool(cfg.flip_prob);
        for p in &mut points {
            if flip_x {
                p.x = -p.x;
            }
            if flip_y {
                p.y = -p.y;
            }
        }
    }
    if cfg.jitter {
        let normal = Normal::new(0.0, cfg.jitter_sigma).expect("positive sigma");
        let clip = cfg.jitter_clip;
        for p in &mut points {
            p.x += normal.sample(&mut rng).clamp(-clip, clip);
            p.y += normal.sample(&mut rng).clamp(-clip, clip);
            p.z += normal.sample(&mut rng).clamp(-clip, clip);
        }
    }

    PointCloud { points, frame_id: cloud.frame_id.clone() }
}

/// Rotate points about the z axis by `angle` radians.
pub fn rotate_z(points: &mut [Point3], angle: f64) {
    let (sin, cos) = angle.sin_cos();
    for p in points {
        let (x, y) = (p.x, p.y);
        p.x = x * cos - y * sin;
        p.y = x * sin + y * cos;
    }
}

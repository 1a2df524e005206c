//! Synthetic LiDAR scenes by ray casting.
//!
//! The sensor sits above the origin and sweeps a regular azimuth/elevation
//! grid against a ground plane and a set of randomly placed primitives. Only
//! first hits within range are kept, so points cluster on surfaces the way
//! real scans do.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Point3, PointCloud};

/// Scene generator parameters. Counts are inclusive ranges per archetype.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    /// Half-extent of the area objects are placed in, meters.
    pub ground_extent: f64,
    pub boxes: (usize, usize),
    pub walls: (usize, usize),
    pub poles: (usize, usize),
    pub spheres: (usize, usize),
    pub sensor_height: f64,
    pub azimuth_count: usize,
    pub elevation_count: usize,
    /// Elevation sweep in degrees, lowest to highest.
    pub elevation_range_deg: (f64, f64),
    pub max_range: f64,
    /// Probability that a ray returns nothing.
    pub dropout: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ground_extent: 30.0,
            boxes: (6, 12),
            walls: (2, 5),
            poles: (4, 10),
            spheres: (2, 6),
            sensor_height: 1.8,
            azimuth_count: 2048,
            elevation_count: 24,
            elevation_range_deg: (-26.0, 4.0),
            max_range: 32.0,
            dropout: 0.03,
        }
    }
}

struct Aabb {
    min: [f64; 3],
    max: [f64; 3],
}

impl Aabb {
    /// Slab-test intersection; returns the nearest positive hit distance.
    fn hit(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for axis in 0..3 {
            if dir[axis].abs() < 1e-12 {
                if origin[axis] < self.min[axis] || origin[axis] > self.max[axis] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[axis];
            let mut t0 = (self.min[axis] - origin[axis]) * inv;
            let mut t1 = (self.max[axis] - origin[axis]) * inv;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        if t_far < 0.0 {
            None
        } else if t_near > 1e-6 {
            Some(t_near)
        } else {
            None
        }
    }
}

struct Sphere {
    center: [f64; 3],
    radius: f64,
}

impl Sphere {
    fn hit(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let oc = [
            origin[0] - self.center[0],
            origin[1] - self.center[1],
            origin[2] - self.center[2],
        ];
        let b = oc[0] * dir[0] + oc[1] * dir[1] + oc[2] * dir[2];
        let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - self.radius * self.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let t = -b - disc.sqrt();
        if t > 1e-6 {
            Some(t)
        } else {
            None
        }
    }
}

fn place_objects(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> (Vec<Aabb>, Vec<Sphere>) {
    let extent = cfg.ground_extent;
    let mut boxes = Vec::new();
    let mut spheres = Vec::new();
    let span = |rng: &mut ChaCha8Rng| rng.gen_range(-extent * 0.9..extent * 0.9);

    let n = rng.gen_range(cfg.boxes.0..=cfg.boxes.1);
    for _ in 0..n {
        let (cx, cy) = (span(rng), span(rng));
        let (w, l) = (rng.gen_range(1.5..5.0), rng.gen_range(1.5..5.0));
        let h = rng.gen_range(1.0..2.5);
        boxes.push(Aabb {
            min: [cx - w / 2.0, cy - l / 2.0, 0.0],
            max: [cx + w / 2.0, cy + l / 2.0, h],
        });
    }
    let n = rng.gen_range(cfg.walls.0..=cfg.walls.1);
    for _ in 0..n {
        let (cx, cy) = (span(rng), span(rng));
        let length = rng.gen_range(5.0..15.0);
        let h = rng.gen_range(2.0..4.0);
        let along_x = rng.gen_bool(0.5);
        let (w, l) = if along_x { (length, 0.2) } else { (0.2, length) };
        boxes.push(Aabb {
            min: [cx - w / 2.0, cy - l / 2.0, 0.0],
            max: [cx + w / 2.0, cy + l / 2.0, h],
        });
    }
    let n = rng.gen_range(cfg.poles.0..=cfg.poles.1);
    for _ in 0..n {
        let (cx, cy) = (span(rng), span(rng));
        let side = rng.gen_range(0.15..0.3);
        let h = rng.gen_range(3.0..6.0);
        boxes.push(Aabb {
            min: [cx - side / 2.0, cy - side / 2.0, 0.0],
            max: [cx + side / 2.0, cy + side / 2.0, h],
        });
    }
    let n = rng.gen_range(cfg.spheres.0..=cfg.spheres.1);
    for _ in 0..n {
        let (cx, cy) = (span(rng), span(rng));
        let r = rng.gen_range(0.3..1.0);
        let cz = rng.gen_range(r..r + 1.5);
        spheres.push(Sphere { center: [cx, cy, cz], radius: r });
    }
    (boxes, spheres)
}

/// Cast the configured ray grid and return first hits, deterministically per
/// seed.
pub fn synth_scene(cfg: &SceneConfig) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (boxes, spheres) = place_objects(cfg, &mut rng);
    let origin = [0.0, 0.0, cfg.sensor_height];

    let mut points = Vec::new();
    let (elev_lo, elev_hi) = cfg.elevation_range_deg;
    for az_step in 0..cfg.azimuth_count {
        let azimuth = 2.0 * std::f64::consts::PI * az_step as f64 / cfg.azimuth_count as f64;
        let (sin_az, cos_az) = azimuth.sin_cos();
        for el_step in 0..cfg.elevation_count {
            let frac = if cfg.elevation_count == 1 {
                0.5
            } else {
                el_step as f64 / (cfg.elevation_count - 1) as f64
            };
            let elevation = (elev_lo + (elev_hi - elev_lo) * frac).to_radians();
            let (sin_el, cos_el) = elevation.sin_cos();
            let dir = [cos_el * cos_az, cos_el * sin_az, sin_el];

            let dropped = rng.gen_bool(cfg.dropout);

            let mut best = f64::INFINITY;
            if dir[2] < 0.0 {
                best = -origin[2] / dir[2]; // ground plane z = 0
            }
            for b in &boxes {
                if let Some(t) = b.hit(origin, dir) {
                    best = best.min(t);
                }
            }
            for s in &spheres {
                if let Some(t) = s.hit(origin, dir) {
                    best = best.min(t);
                }
            }
            if dropped || !best.is_finite() || best > cfg.max_range {
                continue;
            }
            let intensity = (1.0 - best / cfg.max_range) as f32;
            points.push(Point3::with_intensity(
                origin[0] + best * dir[0],
                origin[1] + best * dir[1],
                origin[2] + best * dir[2],
                intensity,
            ));
        }
    }
    PointCloud { points, frame_id: Some(format!("synth-{}", cfg.seed)) }
}

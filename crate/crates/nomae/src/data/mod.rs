//! Point-cloud file I/O, augmentation, and synthetic LiDAR-like scenes.

mod augment;
mod io;
mod synth;

pub use augment::{augment, rotate_z, AugmentConfig};
pub use io::{load_points, save_points, PointFormat};
pub use synth::{synth_scene, SceneConfig};

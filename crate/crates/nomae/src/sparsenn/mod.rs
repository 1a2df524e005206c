//! Minimal reverse-mode differentiable kernels over sparse feature maps:
//! submanifold and expansion convolution, pooling/unpooling, pointwise
//! layers, the stable BCE loss, AdamW, and a binary checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod map;
pub mod params;
pub mod scalar;

pub use adam::{adam_step, cosine_warmup_lr, AdamHyper, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use graph::{bce_element, kernel_offsets, Graph, NodeId};
pub use map::SparseFeatureMap;
pub use params::{GradStore, Param, ParamStore};
pub use scalar::{Dtype, Scalar};

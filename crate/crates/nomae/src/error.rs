//! Error types shared across the pipeline.

use thiserror::Error;

/// Errors raised by pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation received an empty point cloud or voxel set.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// A point cloud contains a NaN or infinite coordinate.
    #[error("point {index} has a non-finite coordinate")]
    InvalidPoint { index: usize },

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A scale index lies outside the pyramid.
    #[error("scale {scale} out of range (pyramid has {num_scales} levels)")]
    InvalidScale { scale: usize, num_scales: usize },

    /// Tensor dimensions do not match.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Two sparse maps were combined but their coordinate sets differ.
    #[error("coordinate sets not aligned: {0}")]
    Alignment(String),

    /// Unpooling found a fine voxel whose parent is absent from the coarse map.
    #[error("missing parent for voxel ({i},{j},{k}) at scale {scale}")]
    MissingParent { i: i32, j: i32, k: i32, scale: u8 },

    /// A decoder's active set does not cover every target coordinate.
    #[error("decoder active set does not cover target ({i},{j},{k}) at scale {scale}")]
    Coverage { i: i32, j: i32, k: i32, scale: u8 },

    /// A NaN or infinite value appeared during forward or backward.
    #[error("non-finite value in node {node} ({op})")]
    Numerical { node: usize, op: String },

    /// A scale has an empty reconstruction neighborhood.
    #[error("scale {scale} has an empty target set")]
    EmptyScale { scale: usize },

    /// A binary file does not match the expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// A text file contains an unparsable token.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by bad configuration or bad input files,
    /// as opposed to numerical failures at run time.
    pub fn is_config(&self) -> bool {
        !matches!(self, Error::Numerical { .. } | Error::Io(_))
    }
}

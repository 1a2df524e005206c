//! Sparse feature maps: a sorted coordinate list plus a dense row matrix.

use std::collections::HashMap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::VoxelCoord;
use crate::sparsenn::scalar::Scalar;

/// Features attached to a sparse set of voxels at one scale.
///
/// Coordinates are kept in lexicographic `(i, j, k)` order so matrix assembly
/// is independent of construction order; feature row `r` belongs to
/// `coords()[r]`.
#[derive(Debug, Clone)]
pub struct SparseFeatureMap<T: Scalar> {
    scale: u8,
    coords: Vec<VoxelCoord>,
    index: HashMap<VoxelCoord, u32>,
    feats: Array2<T>,
}

impl<T: Scalar> SparseFeatureMap<T> {
    /// Build from sorted unique coordinates and a row-aligned matrix.
    pub fn new(scale: u8, coords: Vec<VoxelCoord>, feats: Array2<T>) -> Result<Self> {
        if coords.len() != feats.nrows() {
            return Err(Error::Shape(format!(
                "{} coords but {} feature rows",
                coords.len(),
                feats.nrows()
            )));
        }
        for w in coords.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Shape("coords must be sorted and unique".into()));
            }
        }
        if coords.iter().any(|c| c.scale != scale) {
            return Err(Error::Shape(format!("coord scale differs from map scale {scale}")));
        }
        let index = coords.iter().enumerate().map(|(r, c)| (*c, r as u32)).collect();
        Ok(Self { scale, coords, index, feats })
    }

    /// Build from unsorted rows; sorts by coordinate.
    pub fn from_rows(scale: u8, mut rows: Vec<(VoxelCoord, Vec<T>)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("sparse feature map needs at least one row"));
        }
        rows.sort_unstable_by_key(|(c, _)| *c);
        let channels = rows[0].1.len();
        let mut feats = Array2::zeros((rows.len(), channels));
        let mut coords = Vec::with_capacity(rows.len());
        for (r, (c, values)) in rows.into_iter().enumerate() {
            if values.len() != channels {
                return Err(Error::Shape("ragged feature rows".into()));
            }
            for (ch, v) in values.into_iter().enumerate() {
                feats[(r, ch)] = v;
            }
            coords.push(c);
        }
        Self::new(scale, coords, feats)
    }

    pub fn scale(&self) -> u8 {
        self.scale
    }

    pub fn num_coords(&self) -> usize {
        self.coords.len()
    }

    pub fn channels(&self) -> usize {
        self.feats.ncols()
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn features(&self) -> &Array2<T> {
        &self.feats
    }

    pub fn features_mut(&mut self) -> &mut Array2<T> {
        &mut self.feats
    }

    pub fn row_of(&self, c: &VoxelCoord) -> Option<u32> {
        self.index.get(c).copied()
    }

    pub fn contains(&self, c: &VoxelCoord) -> bool {
        self.index.contains_key(c)
    }

    /// Replace the feature matrix, keeping coordinates.
    pub fn with_features(&self, feats: Array2<T>) -> Result<Self> {
        if feats.nrows() != self.coords.len() {
            return Err(Error::Shape(format!(
                "{} coords but {} feature rows",
                self.coords.len(),
                feats.nrows()
            )));
        }
        Ok(Self { scale: self.scale, coords: self.coords.clone(), index: self.index.clone(), feats })
    }

    pub fn all_finite(&self) -> bool {
        self.feats.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_unsorted_coords() {
        let coords = vec![VoxelCoord::new(1, 0, 0, 0), VoxelCoord::new(0, 0, 0, 0)];
        let feats: Array2<f32> = Array2::zeros((2, 3));
        assert!(SparseFeatureMap::new(0, coords, feats).is_err());
    }

    #[test]
    fn from_rows_sorts() {
        let rows = vec![
            (VoxelCoord::new(1, 0, 0, 0), vec![1.0f32]),
            (VoxelCoord::new(-1, 0, 0, 0), vec![2.0]),
        ];
        let map = SparseFeatureMap::from_rows(0, rows).unwrap();
        assert_eq!(map.coords()[0], VoxelCoord::new(-1, 0, 0, 0));
        assert_eq!(map.features(), &array![[2.0f32], [1.0]]);
        assert_eq!(map.row_of(&VoxelCoord::new(1, 0, 0, 0)), Some(1));
    }

    #[test]
    fn rejects_row_count_mismatch() {
        let coords = vec![VoxelCoord::new(0, 0, 0, 0)];
        let feats: Array2<f64> = Array2::zeros((2, 1));
        assert!(SparseFeatureMap::new(0, coords, feats).is_err());
    }
}

//! Point-cloud representation, voxelization at a base resolution, and the
//! multi-scale occupancy pyramid.
//!
//! Grids use floor (toward negative infinity) indexing so cells have uniform
//! width across zero, and every coarser level is the exact floor-halving of
//! the level below it.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// A single LiDAR return in meters, with an optional intensity in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: Option<f32>,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z, intensity: None }
    }

    pub fn with_intensity(x: f64, y: f64, z: f64, intensity: f32) -> Self {
        Self { x, y, z, intensity: Some(intensity) }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// An ordered sequence of points. Order matters only for payload accumulation
/// determinism; the occupied voxel set is order-free.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub frame_id: Option<String>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points, frame_id: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Integer grid cell at one scale of the pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelCoord {
    pub i: i32,
    pub j: i32,
    pub k: i32,
    pub scale: u8,
}

impl VoxelCoord {
    pub fn new(i: i32, j: i32, k: i32, scale: u8) -> Self {
        Self { i, j, k, scale }
    }

    /// Coarser cell containing this one: componentwise floor division by two.
    /// `(-3).div_euclid(2) == -2`, so negative coordinates pool correctly.
    pub fn parent(&self) -> VoxelCoord {
        VoxelCoord {
            i: self.i.div_euclid(2),
            j: self.j.div_euclid(2),
            k: self.k.div_euclid(2),
            scale: self.scale + 1,
        }
    }

    /// The eight candidate child cells one scale finer.
    pub fn child_block(&self) -> impl Iterator<Item = VoxelCoord> + '_ {
        let (bi, bj, bk) = (self.i * 2, self.j * 2, self.k * 2);
        let scale = self.scale - 1;
        (0..8).map(move |n| VoxelCoord::new(bi + (n & 1), bj + ((n >> 1) & 1), bk + ((n >> 2) & 1), scale))
    }

    pub fn offset(&self, di: i32, dj: i32, dk: i32) -> VoxelCoord {
        VoxelCoord::new(self.i + di, self.j + dj, self.k + dk, self.scale)
    }

    /// Chebyshev (L-infinity) distance to another cell at the same scale.
    pub fn chebyshev(&self, other: &VoxelCoord) -> i32 {
        (self.i - other.i)
            .abs()
            .max((self.j - other.j).abs())
            .max((self.k - other.k).abs())
    }
}

/// Per-voxel aggregate: how many points fell in the cell and their mean
/// position inside it, in `[0, 1)` voxel units per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelPayload {
    pub count: u32,
    pub centroid: [f64; 3],
}

/// Sparse set of occupied cells at one scale, with O(1) expected membership.
#[derive(Debug, Clone)]
pub struct SparseOccupancy {
    scale: u8,
    voxel_size: f64,
    voxels: HashMap<VoxelCoord, VoxelPayload>,
}

impl SparseOccupancy {
    pub fn new(scale: u8, voxel_size: f64) -> Self {
        Self { scale, voxel_size, voxels: HashMap::new() }
    }

    pub fn scale(&self) -> u8 {
        self.scale
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn contains(&self, c: &VoxelCoord) -> bool {
        self.voxels.contains_key(c)
    }

    pub fn payload(&self, c: &VoxelCoord) -> Option<&VoxelPayload> {
        self.voxels.get(c)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VoxelCoord, &VoxelPayload)> {
        self.voxels.iter()
    }

    /// Coordinates in lexicographic `(i, j, k)` order. All order-sensitive
    /// downstream work (float folds, matrix assembly) goes through this.
    pub fn sorted_coords(&self) -> Vec<VoxelCoord> {
        let mut coords: Vec<VoxelCoord> = self.voxels.keys().copied().collect();
        coords.sort_unstable();
        coords
    }

    pub fn insert(&mut self, c: VoxelCoord, payload: VoxelPayload) {
        debug_assert_eq!(c.scale, self.scale);
        self.voxels.insert(c, payload);
    }

    pub fn total_points(&self) -> u64 {
        self.voxels.values().map(|p| u64::from(p.count)).sum()
    }
}

/// Result of [`voxelize`]: the finest occupancy plus the cell each input
/// point landed in, index-aligned with the cloud.
#[derive(Debug, Clone)]
pub struct Voxelization {
    pub occupancy: SparseOccupancy,
    pub point_voxels: Vec<VoxelCoord>,
}

/// Assign every point to its scale-0 cell and aggregate per-cell payloads.
///
/// The cell of point `p` is `floor((p - origin) / base_size)` componentwise.
pub fn voxelize(cloud: &PointCloud, base_size: f64, origin: [f64; 3]) -> Result<Voxelization> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("voxelize: empty point cloud"));
    }
    if base_size <= 0.0 || !base_size.is_finite() {
        return Err(Error::InvalidConfig(format!("base_size must be positive, got {base_size}")));
    }
    if cloud.len() > u32::MAX as usize {
        return Err(Error::InvalidConfig("point count exceeds 32-bit index range".into()));
    }

    let mut point_voxels = Vec::with_capacity(cloud.len());
    let mut sums: HashMap<VoxelCoord, (u32, [f64; 3])> = HashMap::new();

    for (index, p) in cloud.points.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::InvalidPoint { index });
        }
        let mut cell = [0i32; 3];
        let mut frac = [0f64; 3];
        for (axis, value) in [p.x, p.y, p.z].into_iter().enumerate() {
            let scaled = (value - origin[axis]) / base_size;
            let floor = scaled.floor();
            if floor < i32::MIN as f64 || floor > i32::MAX as f64 {
                return Err(Error::InvalidPoint { index });
            }
            cell[axis] = floor as i32;
            frac[axis] = scaled - floor;
        }
        let coord = VoxelCoord::new(cell[0], cell[1], cell[2], 0);
        point_voxels.push(coord);
        let entry = sums.entry(coord).or_insert((0, [0.0; 3]));
        entry.0 += 1;
        for axis in 0..3 {
            entry.1[axis] += frac[axis];
        }
    }

    let mut occupancy = SparseOccupancy::new(0, base_size);
    for (coord, (count, sum)) in sums {
        let inv = 1.0 / f64::from(count);
        occupancy.insert(
            coord,
            VoxelPayload { count, centroid: [sum[0] * inv, sum[1] * inv, sum[2] * inv] },
        );
    }

    Ok(Voxelization { occupancy, point_voxels })
}

/// Stack of occupancy grids at power-of-two voxel sizes, index 0 finest.
#[derive(Debug, Clone)]
pub struct VoxelPyramid {
    levels: Vec<SparseOccupancy>,
    base_size: f64,
    origin: [f64; 3],
}

impl VoxelPyramid {
    pub fn num_scales(&self) -> usize {
        self.levels.len()
    }

    pub fn base_size(&self) -> f64 {
        self.base_size
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn level(&self, scale: usize) -> Result<&SparseOccupancy> {
        self.levels.get(scale).ok_or(Error::InvalidScale { scale, num_scales: self.levels.len() })
    }

    pub fn levels(&self) -> &[SparseOccupancy] {
        &self.levels
    }

    /// Parent coordinate of `c`, checked against the pyramid depth.
    pub fn parent_of(&self, c: VoxelCoord) -> Result<VoxelCoord> {
        let target = c.scale as usize + 1;
        if target >= self.levels.len() {
            return Err(Error::InvalidScale { scale: target, num_scales: self.levels.len() });
        }
        Ok(c.parent())
    }

    /// Occupied children of `c` one scale finer, in sorted order.
    pub fn children_occupied(&self, c: VoxelCoord) -> Result<Vec<VoxelCoord>> {
        if c.scale == 0 {
            return Err(Error::InvalidScale { scale: 0, num_scales: self.levels.len() });
        }
        let child_level = self.level(c.scale as usize - 1)?;
        let mut children: Vec<VoxelCoord> =
            c.child_block().filter(|child| child_level.contains(child)).collect();
        children.sort_unstable();
        Ok(children)
    }
}

/// Build `num_scales` levels by exact floor-halving, aggregating payloads
/// (counts summed, centroids point-count-weighted).
pub fn build_pyramid(finest: SparseOccupancy, num_scales: usize, origin: [f64; 3]) -> Result<VoxelPyramid> {
    if num_scales < 1 {
        return Err(Error::InvalidConfig("pyramid needs at least one scale".into()));
    }
    if finest.scale() != 0 {
        return Err(Error::InvalidConfig("pyramid must start from a scale-0 occupancy".into()));
    }
    let base_size = finest.voxel_size();
    let mut levels = vec![finest];

    for s in 1..num_scales {
        let below = &levels[s - 1];
        // Sorted iteration keeps float accumulation bit-reproducible.
        let mut sums: HashMap<VoxelCoord, (u32, [f64; 3])> = HashMap::new();
        for child in below.sorted_coords() {
            let payload = below.payload(&child).expect("sorted coord present");
            let parent = child.parent();
            let weight = f64::from(payload.count);
            let entry = sums.entry(parent).or_insert((0, [0.0; 3]));
            entry.0 += payload.count;
            // Child centroid re-expressed in parent voxel units:
            // (child parity + child centroid) / 2, per axis.
            let parity = [
                child.i.rem_euclid(2) as f64,
                child.j.rem_euclid(2) as f64,
                child.k.rem_euclid(2) as f64,
            ];
            for axis in 0..3 {
                entry.1[axis] += weight * (parity[axis] + payload.centroid[axis]) / 2.0;
            }
        }
        let mut level = SparseOccupancy::new(s as u8, base_size * f64::powi(2.0, s as i32));
        for (coord, (count, sum)) in sums {
            let inv = 1.0 / f64::from(count);
            level.insert(
                coord,
                VoxelPayload { count, centroid: [sum[0] * inv, sum[1] * inv, sum[2] * inv] },
            );
        }
        levels.push(level);
    }

    Ok(VoxelPyramid { levels, base_size, origin })
}

/// Keep points with `min <= p < max` componentwise, preserving order.
pub fn clip_range(cloud: &PointCloud, min: [f64; 3], max: [f64; 3]) -> Result<PointCloud> {
    for axis in 0..3 {
        // partial_cmp also rejects NaN bounds.
        if min[axis].partial_cmp(&max[axis]) != Some(std::cmp::Ordering::Less) {
            return Err(Error::InvalidConfig(format!(
                "clip range axis {axis}: min {} not below max {}",
                min[axis], max[axis]
            )));
        }
    }
    let points = cloud
        .points
        .iter()
        .filter(|p| {
            let v = [p.x, p.y, p.z];
            (0..3).all(|a| min[a] <= v[a] && v[a] < max[a])
        })
        .copied()
        .collect();
    Ok(PointCloud { points, frame_id: cloud.frame_id.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_cloud(n: usize, extent: f64, seed: u64) -> PointCloud {
        let mut rng = StdRng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-extent..extent),
                        rng.gen_range(-extent..extent),
                        rng.gen_range(-extent..extent),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn single_point_at_origin() {
        let cloud = PointCloud::new(vec![Point3::new(0.0, 0.0, 0.0)]);
        let v = voxelize(&cloud, 0.05, [0.0; 3]).unwrap();
        assert_eq!(v.occupancy.len(), 1);
        let payload = v.occupancy.payload(&VoxelCoord::new(0, 0, 0, 0)).unwrap();
        assert_eq!(payload.count, 1);
        assert_eq!(v.point_voxels[0], VoxelCoord::new(0, 0, 0, 0));
    }

    #[test]
    fn empty_cloud_rejected() {
        let err = voxelize(&PointCloud::default(), 0.05, [0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
    }

    #[test]
    fn non_finite_point_rejected() {
        let cloud = PointCloud::new(vec![Point3::new(0.0, f64::NAN, 0.0)]);
        let err = voxelize(&cloud, 0.05, [0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::InvalidPoint { index: 0 }));
    }

    #[test]
    fn voxelize_matches_per_point_floor_division() {
        // Brute-force oracle: recompute each point's cell independently.
        let cloud = random_cloud(1000, 1.0, 7);
        let base = 0.1;
        let v = voxelize(&cloud, base, [0.0; 3]).unwrap();
        let mut expected: std::collections::HashSet<(i32, i32, i32)> = Default::default();
        for p in &cloud.points {
            expected.insert((
                (p.x / base).floor() as i32,
                (p.y / base).floor() as i32,
                (p.z / base).floor() as i32,
            ));
        }
        let got: std::collections::HashSet<(i32, i32, i32)> =
            v.occupancy.iter().map(|(c, _)| (c.i, c.j, c.k)).collect();
        assert_eq!(got, expected);
        assert_eq!(v.occupancy.total_points(), 1000);
    }

    #[test]
    fn occupied_set_is_permutation_invariant() {
        let cloud = random_cloud(500, 2.0, 11);
        let mut reversed = cloud.clone();
        reversed.points.reverse();
        let a = voxelize(&cloud, 0.07, [0.1, -0.2, 0.3]).unwrap();
        let b = voxelize(&reversed, 0.07, [0.1, -0.2, 0.3]).unwrap();
        assert_eq!(a.occupancy.sorted_coords(), b.occupancy.sorted_coords());
        for c in a.occupancy.sorted_coords() {
            assert_eq!(a.occupancy.payload(&c).unwrap().count, b.occupancy.payload(&c).unwrap().count);
        }
    }

    #[test]
    fn centroid_lies_in_unit_cube() {
        let cloud = random_cloud(2000, 3.0, 13);
        let v = voxelize(&cloud, 0.05, [0.0; 3]).unwrap();
        for (_, payload) in v.occupancy.iter() {
            for axis in 0..3 {
                assert!(payload.centroid[axis] >= 0.0 && payload.centroid[axis] < 1.0);
            }
        }
    }

    #[test]
    fn pyramid_scale_ladder() {
        let cloud = PointCloud::new(vec![Point3::new(0.01, 0.01, 0.01)]);
        let v = voxelize(&cloud, 0.05, [0.0; 3]).unwrap();
        let pyramid = build_pyramid(v.occupancy, 4, [0.0; 3]).unwrap();
        let sizes: Vec<f64> = pyramid.levels().iter().map(|l| l.voxel_size()).collect();
        assert_eq!(sizes, vec![0.05, 0.10, 0.20, 0.40]);
    }

    #[test]
    fn single_voxel_occupies_every_level() {
        let cloud = PointCloud::new(vec![Point3::new(0.01, 0.02, 0.03)]);
        let v = voxelize(&cloud, 0.05, [0.0; 3]).unwrap();
        let pyramid = build_pyramid(v.occupancy, 3, [0.0; 3]).unwrap();
        for s in 0..3 {
            let level = pyramid.level(s).unwrap();
            assert_eq!(level.len(), 1);
            assert!(level.contains(&VoxelCoord::new(0, 0, 0, s as u8)));
        }
    }

    #[test]
    fn pyramid_levels_match_floor_halving_oracle() {
        let cloud = random_cloud(500, 4.0, 17);
        let v = voxelize(&cloud, 0.05, [0.0; 3]).unwrap();
        let pyramid = build_pyramid(v.occupancy, 4, [0.0; 3]).unwrap();
        for s in 0..3 {
            let expected: std::collections::HashSet<VoxelCoord> =
                pyramid.level(s).unwrap().iter().map(|(c, _)| c.parent()).collect();
            let got: std::collections::HashSet<VoxelCoord> =
                pyramid.level(s + 1).unwrap().iter().map(|(c, _)| *c).collect();
            assert_eq!(got, expected, "scale {s}");
        }
    }

    #[test]
    fn point_conservation_across_scales() {
        let cloud = random_cloud(1234, 2.5, 19);
        let v = voxelize(&cloud, 0.05, [0.0; 3]).unwrap();
        let pyramid = build_pyramid(v.occupancy, 4, [0.0; 3]).unwrap();
        for level in pyramid.levels() {
            assert_eq!(level.total_points(), 1234);
        }
    }

    #[test]
    fn parent_uses_floor_division() {
        let c = VoxelCoord::new(5, -3, 2, 0);
        assert_eq!(c.parent(), VoxelCoord::new(2, -2, 1, 1));
    }

    #[test]
    fn children_of_parent_contain_child() {
        let cloud = random_cloud(300, 1.0, 23);
        let v = voxelize(&cloud, 0.05, [0.0; 3]).unwrap();
        let pyramid = build_pyramid(v.occupancy, 3, [0.0; 3]).unwrap();
        for s in 0..2usize {
            for c in pyramid.level(s).unwrap().sorted_coords() {
                let children = pyramid.children_occupied(c.parent()).unwrap();
                assert!(children.contains(&c));
                assert!(!children.is_empty());
            }
        }
    }

    #[test]
    fn children_at_scale_zero_rejected() {
        let cloud = PointCloud::new(vec![Point3::new(0.0, 0.0, 0.0)]);
        let v = voxelize(&cloud, 0.05, [0.0; 3]).unwrap();
        let pyramid = build_pyramid(v.occupancy, 2, [0.0; 3]).unwrap();
        let err = pyramid.children_occupied(VoxelCoord::new(0, 0, 0, 0)).unwrap_err();
        assert!(matches!(err, Error::InvalidScale { .. }));
    }

    #[test]
    fn clip_keeps_half_open_box() {
        let cloud = PointCloud::new(vec![
            Point3::new(-1.0, 0.0, 0.0),
            Point3::new(0.5, 0.5, 0.5),
            Point3::new(1.0, 0.5, 0.5), // exactly max on x: excluded
        ]);
        let clipped = clip_range(&cloud, [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(clipped.points, vec![Point3::new(0.5, 0.5, 0.5)]);
    }

    #[test]
    fn clip_with_infinite_bounds_is_identity() {
        let cloud = random_cloud(100, 5.0, 29);
        let clipped =
            clip_range(&cloud, [f64::NEG_INFINITY; 3], [f64::INFINITY; 3]).unwrap();
        assert_eq!(clipped, cloud);
    }

    #[test]
    fn clip_matches_per_point_predicate() {
        let cloud = random_cloud(100, 2.0, 31);
        let (min, max) = ([-1.0, -0.5, -2.0], [1.0, 1.5, 0.5]);
        let clipped = clip_range(&cloud, min, max).unwrap();
        let expected: Vec<Point3> = cloud
            .points
            .iter()
            .filter(|p| {
                let v = [p.x, p.y, p.z];
                (0..3).all(|a| min[a] <= v[a] && v[a] < max[a])
            })
            .copied()
            .collect();
        assert_eq!(clipped.points, expected);
    }

    #[test]
    fn default_detection_range_accepted() {
        let cloud = random_cloud(50, 60.0, 37);
        let clipped = clip_range(&cloud, [-51.2, -51.2, -5.0], [51.2, 51.2, 3.0]).unwrap();
        for p in &clipped.points {
            assert!(p.x >= -51.2 && p.x < 51.2);
            assert!(p.z >= -5.0 && p.z < 3.0);
        }
    }

    #[test]
    fn voxelize_is_deterministic() {
        let cloud = random_cloud(800, 3.0, 41);
        let a = voxelize(&cloud, 0.05, [0.0; 3]).unwrap();
        let b = voxelize(&cloud, 0.05, [0.0; 3]).unwrap();
        for c in a.occupancy.sorted_coords() {
            let pa = a.occupancy.payload(&c).unwrap();
            let pb = b.occupancy.payload(&c).unwrap();
            assert_eq!(pa.count, pb.count);
            assert_eq!(pa.centroid, pb.centroid);
        }
    }
}

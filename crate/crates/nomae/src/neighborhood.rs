//! Reconstruction domain around the visible voxels.
//!
//! At each scale the target coordinates are the Chebyshev dilation of the
//! visible set minus the visible set itself, so target positions depend only
//! on disclosed geometry. Occupied targets are necessarily masked voxels;
//! masked voxels outside the dilation are "lost" and never touch the loss.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use crate::error::{Error, Result};
use crate::geometry::{VoxelCoord, VoxelPyramid};
use crate::masking::MaskAssignment;

/// Per-scale neighborhood side lengths `n_s` (odd, >= 3). The Chebyshev
/// radius is `(n_s - 1) / 2`; metric extent doubles per scale along with the
/// voxel size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodSpec {
    sides: Vec<u32>,
}

impl NeighborhoodSpec {
    /// Same side length at every scale.
    pub fn uniform(n: u32, num_scales: usize) -> Result<Self> {
        Self::from_sides(vec![n; num_scales])
    }

    pub fn from_sides(sides: Vec<u32>) -> Result<Self> {
        if sides.is_empty() {
            return Err(Error::InvalidConfig("neighborhood spec needs at least one scale".into()));
        }
        for &n in &sides {
            if n < 3 || n % 2 == 0 {
                return Err(Error::InvalidConfig(format!(
                    "neighborhood side {n} must be odd and at least 3"
                )));
            }
        }
        Ok(Self { sides })
    }

    pub fn num_scales(&self) -> usize {
        self.sides.len()
    }

    pub fn side(&self, scale: usize) -> Result<u32> {
        self.sides
            .get(scale)
            .copied()
            .ok_or(Error::InvalidScale { scale, num_scales: self.sides.len() })
    }

    pub fn radius(&self, scale: usize) -> Result<i32> {
        Ok((self.side(scale)? as i32 - 1) / 2)
    }
}

/// Chebyshev dilation of `visible` by radius `radius`, minus `visible`.
pub fn dilate(visible: &HashSet<VoxelCoord>, radius: i32) -> Result<HashSet<VoxelCoord>> {
    if radius < 1 {
        return Err(Error::InvalidConfig(format!("dilation radius {radius} must be at least 1")));
    }
    if visible.is_empty() {
        return Err(Error::EmptyInput("dilate: empty visible set"));
    }
    let mut out = HashSet::with_capacity(visible.len() * 8);
    for v in visible {
        for di in -radius..=radius {
            for dj in -radius..=radius {
                for dk in -radius..=radius {
                    out.insert(v.offset(di, dj, dk));
                }
            }
        }
    }
    for v in visible {
        out.remove(v);
    }
    Ok(out)
}

/// Target coordinates and binary occupancy labels for every scale.
#[derive(Debug, Clone)]
pub struct TargetSet {
    scales: Vec<ScaleTargets>,
}

/// One scale's targets: sorted coordinates and index-aligned labels.
#[derive(Debug, Clone)]
pub struct ScaleTargets {
    pub coords: Vec<VoxelCoord>,
    pub labels: Vec<bool>,
}

impl ScaleTargets {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

impl TargetSet {
    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn scale(&self, s: usize) -> Result<&ScaleTargets> {
        self.scales.get(s).ok_or(Error::InvalidScale { scale: s, num_scales: self.scales.len() })
    }

    pub fn scales(&self) -> &[ScaleTargets] {
        &self.scales
    }

    /// Dump `(scale, i, j, k, label)` rows as CSV.
    pub fn to_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "scale,i,j,k,label")?;
        for (s, targets) in self.scales.iter().enumerate() {
            for (c, &label) in targets.coords.iter().zip(&targets.labels) {
                writeln!(out, "{},{},{},{},{}", s, c.i, c.j, c.k, u8::from(label))?;
            }
        }
        Ok(())
    }
}

/// Dilate each scale's visible set and label each target coordinate with the
/// ground-truth occupancy at that scale.
pub fn build_targets(
    assignment: &MaskAssignment,
    pyramid: &VoxelPyramid,
    spec: &NeighborhoodSpec,
) -> Result<TargetSet> {
    let num_scales = pyramid.num_scales();
    if assignment.num_scales() != num_scales || spec.num_scales() != num_scales {
        return Err(Error::InvalidConfig(format!(
            "scale mismatch: pyramid {num_scales}, assignment {}, spec {}",
            assignment.num_scales(),
            spec.num_scales()
        )));
    }
    let mut scales = Vec::with_capacity(num_scales);
    for s in 0..num_scales {
        let neighborhood = dilate(assignment.visible(s)?, spec.radius(s)?)?;
        let mut coords: Vec<VoxelCoord> = neighborhood.into_iter().collect();
        coords.sort_unstable();
        let level = pyramid.level(s)?;
        let labels = coords.iter().map(|c| level.contains(c)).collect();
        scales.push(ScaleTargets { coords, labels });
    }
    Ok(TargetSet { scales })
}

/// Per-scale recovered/lost bookkeeping for the masked voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredLost {
    pub scale: usize,
    pub masked: usize,
    pub recovered: usize,
    pub lost: usize,
    pub recovered_fraction: f64,
}

/// Count masked voxels inside (`recovered`) and outside (`lost`) the target
/// neighborhood at every scale.
pub fn recovered_lost_accounting(
    assignment: &MaskAssignment,
    targets: &TargetSet,
) -> Result<Vec<RecoveredLost>> {
    if assignment.num_scales() != targets.num_scales() {
        return Err(Error::InvalidConfig(format!(
            "scale mismatch: assignment {}, targets {}",
            assignment.num_scales(),
            targets.num_scales()
        )));
    }
    let mut rows = Vec::with_capacity(targets.num_scales());
    for s in 0..targets.num_scales() {
        let masked = assignment.masked(s)?;
        let target: HashSet<&VoxelCoord> = targets.scale(s)?.coords.iter().collect();
        let recovered = masked.iter().filter(|c| target.contains(c)).count();
        let lost = masked.len() - recovered;
        rows.push(RecoveredLost {
            scale: s,
            masked: masked.len(),
            recovered,
            lost,
            recovered_fraction: if masked.is_empty() {
                1.0
            } else {
                recovered as f64 / masked.len() as f64
            },
        });
    }
    Ok(rows)
}

/// The set of "lost" masked voxels per scale: masked but outside the targets.
pub fn lost_voxels(assignment: &MaskAssignment, targets: &TargetSet) -> Result<Vec<HashSet<VoxelCoord>>> {
    let mut out = Vec::with_capacity(targets.num_scales());
    for s in 0..targets.num_scales() {
        let target: HashSet<&VoxelCoord> = targets.scale(s)?.coords.iter().collect();
        out.push(
            assignment
                .masked(s)?
                .iter()
                .filter(|c| !target.contains(*c))
                .copied()
                .collect(),
        );
    }
    Ok(out)
}

/// Index lookup from coordinate to row for one scale's targets.
pub fn coord_index(targets: &ScaleTargets) -> HashMap<VoxelCoord, usize> {
    targets.coords.iter().enumerate().map(|(idx, c)| (*c, idx)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_pyramid, voxelize, Point3, PointCloud};
    use crate::masking::{hmg_generate, MaskingConfig, Strategy};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn coord_set(coords: &[(i32, i32, i32)], scale: u8) -> HashSet<VoxelCoord> {
        coords.iter().map(|&(i, j, k)| VoxelCoord::new(i, j, k, scale)).collect()
    }

    fn random_scene(seed: u64, n: usize) -> (VoxelPyramid, MaskAssignment) {
        let mut rng = StdRng::seed_from_u64(seed);
        let cloud = PointCloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5))
                })
                .collect(),
        );
        let v = voxelize(&cloud, 0.05, [0.0; 3]).unwrap();
        let pyramid = build_pyramid(v.occupancy, 4, [0.0; 3]).unwrap();
        let cfg = MaskingConfig::for_total_finest_ratio(0.7, 4, Strategy::Hmg, seed).unwrap();
        let assignment = hmg_generate(&pyramid, &cfg).unwrap();
        (pyramid, assignment)
    }

    #[test]
    fn single_voxel_radius_one_has_26_neighbors() {
        let visible = coord_set(&[(0, 0, 0)], 0);
        let out = dilate(&visible, 1).unwrap();
        assert_eq!(out.len(), 26);
        assert!(!out.contains(&VoxelCoord::new(0, 0, 0, 0)));
    }

    #[test]
    fn single_voxel_radius_four_has_728_neighbors() {
        let visible = coord_set(&[(2, -1, 3)], 1);
        let out = dilate(&visible, 4).unwrap();
        assert_eq!(out.len(), 9 * 9 * 9 - 1);
    }

    #[test]
    fn dilate_excludes_input_and_respects_radius() {
        let mut rng = StdRng::seed_from_u64(3);
        let visible: HashSet<VoxelCoord> = (0..200)
            .map(|_| VoxelCoord::new(rng.gen_range(-20..20), rng.gen_range(-20..20), rng.gen_range(-20..20), 0))
            .collect();
        let out = dilate(&visible, 2).unwrap();
        assert!(out.is_disjoint(&visible));
        for c in &out {
            let nearest = visible.iter().map(|v| v.chebyshev(c)).min().unwrap();
            assert!(nearest >= 1 && nearest <= 2);
        }
    }

    #[test]
    fn dilate_rejects_bad_inputs() {
        assert!(matches!(dilate(&HashSet::new(), 1), Err(Error::EmptyInput(_))));
        let visible = coord_set(&[(0, 0, 0)], 0);
        assert!(matches!(dilate(&visible, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn spec_validates_sides() {
        assert!(NeighborhoodSpec::uniform(9, 4).is_ok());
        assert!(NeighborhoodSpec::uniform(4, 4).is_err());
        assert!(NeighborhoodSpec::uniform(1, 4).is_err());
        let spec = NeighborhoodSpec::uniform(9, 4).unwrap();
        assert_eq!(spec.radius(0).unwrap(), 4);
    }

    #[test]
    fn no_masking_gives_all_zero_labels() {
        let (pyramid, _) = random_scene(11, 400);
        let cfg = MaskingConfig::new(0.0, Strategy::Hmg, 0).unwrap();
        let assignment = hmg_generate(&pyramid, &cfg).unwrap();
        let spec = NeighborhoodSpec::uniform(5, 4).unwrap();
        let targets = build_targets(&assignment, &pyramid, &spec).unwrap();
        for s in 0..4 {
            assert!(targets.scale(s).unwrap().labels.iter().all(|&l| !l));
        }
    }

    #[test]
    fn labels_match_membership_oracle() {
        let (pyramid, assignment) = random_scene(13, 500);
        let spec = NeighborhoodSpec::uniform(9, 4).unwrap();
        let targets = build_targets(&assignment, &pyramid, &spec).unwrap();
        for s in 0..4 {
            let level = pyramid.level(s).unwrap();
            let st = targets.scale(s).unwrap();
            for (c, &label) in st.coords.iter().zip(&st.labels) {
                assert_eq!(label, level.contains(c));
                if label {
                    // Occupied targets are necessarily masked.
                    assert!(assignment.masked(s).unwrap().contains(c));
                }
                assert!(!assignment.visible(s).unwrap().contains(c));
            }
        }
    }

    #[test]
    fn isolated_masked_voxel_is_lost() {
        // Two points far apart; mask the far one by seed search.
        let cloud = PointCloud::new(vec![
            Point3::new(0.01, 0.01, 0.01),
            Point3::new(5.0, 5.0, 5.0),
        ]);
        let v = voxelize(&cloud, 0.05, [0.0; 3]).unwrap();
        let pyramid = build_pyramid(v.occupancy, 2, [0.0; 3]).unwrap();
        let far = VoxelCoord::new(100, 100, 100, 0);
        let mut found = false;
        for seed in 0..200 {
            let cfg = MaskingConfig::new(0.5, Strategy::Hmg, seed).unwrap();
            let assignment = hmg_generate(&pyramid, &cfg).unwrap();
            if assignment.masked(0).unwrap().contains(&far)
                && !assignment.masked(0).unwrap().contains(&VoxelCoord::new(0, 0, 0, 0))
            {
                let spec = NeighborhoodSpec::uniform(9, 2).unwrap();
                let targets = build_targets(&assignment, &pyramid, &spec).unwrap();
                assert!(!targets.scale(0).unwrap().coords.contains(&far));
                let accounting = recovered_lost_accounting(&assignment, &targets).unwrap();
                assert_eq!(accounting[0].lost, 1);
                found = true;
                break;
            }
        }
        assert!(found, "no seed masked exactly the far voxel");
    }

    #[test]
    fn accounting_reconciles_counts() {
        let (pyramid, assignment) = random_scene(17, 600);
        let spec = NeighborhoodSpec::uniform(9, 4).unwrap();
        let targets = build_targets(&assignment, &pyramid, &spec).unwrap();
        let rows = recovered_lost_accounting(&assignment, &targets).unwrap();
        for (s, row) in rows.iter().enumerate() {
            assert_eq!(row.masked, assignment.masked(s).unwrap().len());
            assert_eq!(row.recovered + row.lost, row.masked);
            assert!((0.0..=1.0).contains(&row.recovered_fraction));
            // Recovered voxels are exactly the positive labels.
            assert_eq!(row.recovered, targets.scale(s).unwrap().positives());
        }
    }

    #[test]
    fn target_coords_do_not_depend_on_masked_geometry() {
        // Rebuilding the targets after deleting masked voxels from the
        // pyramid must leave the coordinates unchanged (labels may differ).
        let (pyramid, assignment) = random_scene(19, 500);
        let spec = NeighborhoodSpec::uniform(5, 4).unwrap();
        let targets = build_targets(&assignment, &pyramid, &spec).unwrap();

        let mut stripped_levels = Vec::new();
        for s in 0..4 {
            let level = pyramid.level(s).unwrap();
            let mut stripped = crate::geometry::SparseOccupancy::new(s as u8, level.voxel_size());
            for (c, p) in level.iter() {
                if !assignment.masked(s).unwrap().contains(c) {
                    stripped.insert(*c, *p);
                }
            }
            stripped_levels.push(stripped);
        }
        for s in 0..4 {
            let visible = assignment.visible(s).unwrap();
            let dilated = dilate(visible, spec.radius(s).unwrap()).unwrap();
            let mut coords: Vec<VoxelCoord> = dilated.into_iter().collect();
            coords.sort_unstable();
            assert_eq!(coords, targets.scale(s).unwrap().coords);
            // All coordinates survive in the stripped occupancy's complement.
            for c in &coords {
                assert!(!visible.contains(c));
            }
            let _ = &stripped_levels[s];
        }
    }

    #[test]
    fn csv_dump_has_expected_shape() {
        let (pyramid, assignment) = random_scene(23, 200);
        let spec = NeighborhoodSpec::uniform(3, 4).unwrap();
        let targets = build_targets(&assignment, &pyramid, &spec).unwrap();
        let mut buf = Vec::new();
        targets.to_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "scale,i,j,k,label");
        let total: usize = (0..4).map(|s| targets.scale(s).unwrap().len()).sum();
        assert_eq!(text.lines().count(), total + 1);
    }
}

//! Per-scale visible/masked partitions of the occupancy pyramid.
//!
//! Three strategies are implemented side by side so they can be compared at a
//! matched finest-scale masking ratio:
//!
//! * [`Strategy::Hmg`] — hierarchical generation: mask the coarsest scale
//!   with per-voxel probability `r`, then at each finer scale re-sample only
//!   the voxels whose parent stayed visible. Children of masked parents are
//!   masked outright, so masks are consistent across scales and every scale
//!   keeps a usable masking ratio.
//! * [`Strategy::NaivePoolUp`] — mask the finest scale i.i.d. and call a
//!   coarse voxel masked only when all of its occupied children are masked.
//!   The coarse-scale ratio collapses on clustered scenes.
//! * [`Strategy::CoarseUpsample`] — mask the coarsest scale i.i.d. and let
//!   every finer voxel inherit its parent's state.
//!
//! Mask decisions are a counter-based hash of `(seed, scale, i, j, k)`, so an
//! assignment is a pure function of the pyramid and the config, independent
//! of set iteration order.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{SparseOccupancy, VoxelCoord, VoxelPyramid};

/// Mask generation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Hmg,
    NaivePoolUp,
    CoarseUpsample,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Hmg => "hmg",
            Strategy::NaivePoolUp => "naive",
            Strategy::CoarseUpsample => "upsample",
        }
    }
}

/// Masking parameters.
///
/// `ratio` is the probability used at the strategy's sampling scale: the
/// per-scale Bernoulli rate for HMG, the finest-scale rate for NaivePoolUp,
/// and the coarsest-scale rate for CoarseUpsample. `ratio = 1` is accepted as
/// the degenerate all-masked configuration; downstream operations that need a
/// visible voxel then fail with `EmptyInput`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub ratio: f64,
    pub strategy: Strategy,
    pub seed: u64,
}

impl MaskingConfig {
    pub fn new(ratio: f64, strategy: Strategy, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) || !ratio.is_finite() {
            return Err(Error::InvalidConfig(format!("masking ratio {ratio} outside [0, 1]")));
        }
        Ok(Self { ratio, strategy, seed })
    }

    /// Build a config that reaches `total` masked fraction at the finest
    /// scale. HMG applies one Bernoulli round per scale, so its per-scale
    /// rate is the inversion of the procedural ratio law; the two baselines
    /// sample the target fraction directly at their seeding scale.
    pub fn for_total_finest_ratio(
        total: f64,
        num_scales: usize,
        strategy: Strategy,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&total) {
            return Err(Error::InvalidConfig(format!("total masking ratio {total} outside [0, 1)")));
        }
        let ratio = match strategy {
            Strategy::Hmg => per_scale_rate_for_total(total, num_scales)?,
            Strategy::NaivePoolUp | Strategy::CoarseUpsample => total,
        };
        Self::new(ratio, strategy, seed)
    }
}

/// Invert the procedural ratio law `1 - (1 - r)^S` for the per-scale rate.
pub fn per_scale_rate_for_total(total: f64, num_scales: usize) -> Result<f64> {
    if num_scales < 1 {
        return Err(Error::InvalidConfig("num_scales must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&total) {
        return Err(Error::InvalidConfig(format!("total masking ratio {total} outside [0, 1)")));
    }
    Ok(1.0 - (1.0 - total).powf(1.0 / num_scales as f64))
}

/// Which closed form to evaluate in [`expected_total_ratio`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioVariant {
    /// The printed formula: `1 - (1 - r)^(S - s + 1)`.
    PaperEq3,
    /// One Bernoulli round per scale from `S-1` down to `s`:
    /// `1 - (1 - r)^(S - s)`. This is what the generation procedure does.
    Simulated,
}

/// Expected total masking ratio at scale `s` under HMG with per-scale rate
/// `r`. Both variants are exposed because the printed exponent disagrees
/// with the procedure by one round; reports show them side by side.
pub fn expected_total_ratio(r: f64, num_scales: usize, s: usize, variant: RatioVariant) -> Result<f64> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::InvalidConfig(format!("rate {r} outside [0, 1)")));
    }
    if s >= num_scales {
        return Err(Error::InvalidConfig(format!("scale {s} not below num_scales {num_scales}")));
    }
    let rounds = match variant {
        RatioVariant::PaperEq3 => num_scales - s + 1,
        RatioVariant::Simulated => num_scales - s,
    };
    Ok(1.0 - (1.0 - r).powi(rounds as i32))
}

/// Per-scale partition of the occupied voxels into visible and masked sets.
#[derive(Debug, Clone)]
pub struct MaskAssignment {
    visible: Vec<HashSet<VoxelCoord>>,
    masked: Vec<HashSet<VoxelCoord>>,
}

impl MaskAssignment {
    pub fn num_scales(&self) -> usize {
        self.visible.len()
    }

    pub fn visible(&self, scale: usize) -> Result<&HashSet<VoxelCoord>> {
        self.visible.get(scale).ok_or(Error::InvalidScale { scale, num_scales: self.visible.len() })
    }

    pub fn masked(&self, scale: usize) -> Result<&HashSet<VoxelCoord>> {
        self.masked.get(scale).ok_or(Error::InvalidScale { scale, num_scales: self.masked.len() })
    }

    pub fn is_masked(&self, c: &VoxelCoord) -> bool {
        self.masked
            .get(c.scale as usize)
            .map(|set| set.contains(c))
            .unwrap_or(false)
    }

    /// Sorted visible coordinates at one scale.
    pub fn visible_sorted(&self, scale: usize) -> Result<Vec<VoxelCoord>> {
        let mut coords: Vec<VoxelCoord> = self.visible(scale)?.iter().copied().collect();
        coords.sort_unstable();
        Ok(coords)
    }
}

// splitmix64 finalizer; full 64-bit avalanche.
fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x
}

/// Combine a seed with a salt into a fresh stream seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    mix64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Deterministic uniform draw in `[0, 1)` keyed by (seed, scale, coord).
fn unit_hash(seed: u64, c: &VoxelCoord) -> f64 {
    let mut h = mix64(seed ^ 0xa076_1d64_78bd_642f);
    h = mix64(h ^ (c.scale as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    h = mix64(h ^ (c.i as u32 as u64));
    h = mix64(h ^ (c.j as u32 as u64) << 1);
    h = mix64(h ^ (c.k as u32 as u64) << 2);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn check_pyramid(pyramid: &VoxelPyramid) -> Result<()> {
    for (s, level) in pyramid.levels().iter().enumerate() {
        if level.is_empty() {
            return Err(Error::EmptyInput(if s == 0 {
                "masking: empty finest pyramid level"
            } else {
                "masking: empty pyramid level"
            }));
        }
    }
    Ok(())
}

/// Hierarchical mask generation, coarsest scale first.
pub fn hmg_generate(pyramid: &VoxelPyramid, cfg: &MaskingConfig) -> Result<MaskAssignment> {
    check_pyramid(pyramid)?;
    let num_scales = pyramid.num_scales();
    let mut visible = vec![HashSet::new(); num_scales];
    let mut masked = vec![HashSet::new(); num_scales];

    for s in (0..num_scales).rev() {
        let level = pyramid.level(s)?;
        for (&c, _) in level.iter() {
            let parent_masked = s + 1 < num_scales && masked[s + 1].contains(&c.parent());
            let is_masked = parent_masked || unit_hash(cfg.seed, &c) < cfg.ratio;
            if is_masked {
                masked[s].insert(c);
            } else {
                visible[s].insert(c);
            }
        }
    }
    Ok(MaskAssignment { visible, masked })
}

/// Finest scale masked i.i.d.; a coarse voxel is masked only when all of its
/// occupied children are masked.
pub fn naive_generate(pyramid: &VoxelPyramid, cfg: &MaskingConfig) -> Result<MaskAssignment> {
    check_pyramid(pyramid)?;
    let num_scales = pyramid.num_scales();
    let mut visible = vec![HashSet::new(); num_scales];
    let mut masked = vec![HashSet::new(); num_scales];

    for s in 0..num_scales {
        let level = pyramid.level(s)?;
        for (&c, _) in level.iter() {
            let is_masked = if s == 0 {
                unit_hash(cfg.seed, &c) < cfg.ratio
            } else {
                pyramid.children_occupied(c)?.iter().all(|child| masked[s - 1].contains(child))
            };
            if is_masked {
                masked[s].insert(c);
            } else {
                visible[s].insert(c);
            }
        }
    }
    Ok(MaskAssignment { visible, masked })
}

/// Coarsest scale masked i.i.d.; every finer voxel inherits its parent state.
pub fn upsample_generate(pyramid: &VoxelPyramid, cfg: &MaskingConfig) -> Result<MaskAssignment> {
    check_pyramid(pyramid)?;
    let num_scales = pyramid.num_scales();
    let mut visible = vec![HashSet::new(); num_scales];
    let mut masked = vec![HashSet::new(); num_scales];

    for s in (0..num_scales).rev() {
        let level = pyramid.level(s)?;
        for (&c, _) in level.iter() {
            let is_masked = if s == num_scales - 1 {
                unit_hash(cfg.seed, &c) < cfg.ratio
            } else {
                masked[s + 1].contains(&c.parent())
            };
            if is_masked {
                masked[s].insert(c);
            } else {
                visible[s].insert(c);
            }
        }
    }
    Ok(MaskAssignment { visible, masked })
}

/// Dispatch on the configured strategy.
pub fn generate(pyramid: &VoxelPyramid, cfg: &MaskingConfig) -> Result<MaskAssignment> {
    match cfg.strategy {
        Strategy::Hmg => hmg_generate(pyramid, cfg),
        Strategy::NaivePoolUp => naive_generate(pyramid, cfg),
        Strategy::CoarseUpsample => upsample_generate(pyramid, cfg),
    }
}

/// One row of the masking report.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleMaskStats {
    pub scale: usize,
    pub occupied: usize,
    pub masked: usize,
    pub ratio: f64,
    pub eq3_paper: f64,
    pub eq3_sim: f64,
}

/// Per-scale masking statistics plus the two closed-form predictions for the
/// configured rate.
#[derive(Debug, Clone)]
pub struct MaskStats {
    pub rows: Vec<ScaleMaskStats>,
}

impl MaskStats {
    pub fn to_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "scale,occupied,masked,ratio,eq3_paper,eq3_sim")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6}",
                r.scale, r.occupied, r.masked, r.ratio, r.eq3_paper, r.eq3_sim
            )?;
        }
        Ok(())
    }

    pub fn to_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{:>5} {:>9} {:>9} {:>8} {:>9} {:>8}", "scale", "occupied", "masked", "ratio", "eq3paper", "eq3sim")?;
        for r in &self.rows {
            writeln!(
                out,
                "{:>5} {:>9} {:>9} {:>8.4} {:>9.4} {:>8.4}",
                r.scale, r.occupied, r.masked, r.ratio, r.eq3_paper, r.eq3_sim
            )?;
        }
        Ok(())
    }
}

/// Count occupied/masked voxels per scale and attach both ratio predictions.
pub fn mask_stats(
    assignment: &MaskAssignment,
    pyramid: &VoxelPyramid,
    cfg: &MaskingConfig,
) -> Result<MaskStats> {
    if assignment.num_scales() != pyramid.num_scales() {
        return Err(Error::InvalidConfig(format!(
            "assignment has {} scales, pyramid has {}",
            assignment.num_scales(),
            pyramid.num_scales()
        )));
    }
    let num_scales = pyramid.num_scales();
    let rate = cfg.ratio.min(1.0 - f64::EPSILON); // closed forms need r < 1
    let mut rows = Vec::with_capacity(num_scales);
    for s in 0..num_scales {
        let occupied = pyramid.level(s)?.len();
        let masked = assignment.masked(s)?.len();
        let visible = assignment.visible(s)?.len();
        if masked + visible != occupied {
            return Err(Error::InvalidConfig(format!(
                "scale {s}: partition sizes {masked}+{visible} != occupied {occupied}"
            )));
        }
        rows.push(ScaleMaskStats {
            scale: s,
            occupied,
            masked,
            ratio: if occupied == 0 { 0.0 } else { masked as f64 / occupied as f64 },
            eq3_paper: expected_total_ratio(rate, num_scales, s, RatioVariant::PaperEq3)?,
            eq3_sim: expected_total_ratio(rate, num_scales, s, RatioVariant::Simulated)?,
        });
    }
    Ok(MaskStats { rows })
}

/// Finest-scale visible voxels with their payloads: the encoder's input.
pub fn encoder_input(assignment: &MaskAssignment, pyramid: &VoxelPyramid) -> Result<SparseOccupancy> {
    let finest = pyramid.level(0)?;
    let visible = assignment.visible(0)?;
    if visible.is_empty() {
        return Err(Error::EmptyInput("no visible voxels at the finest scale"));
    }
    let mut out = SparseOccupancy::new(0, finest.voxel_size());
    for c in visible {
        let payload = finest
            .payload(c)
            .ok_or_else(|| Error::InvalidConfig(format!("visible voxel {c:?} not in pyramid")))?;
        out.insert(*c, *payload);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_pyramid, voxelize, Point3, PointCloud};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_pyramid(n: usize, extent: f64, seed: u64, scales: usize) -> VoxelPyramid {
        let mut rng = StdRng::seed_from_u64(seed);
        let cloud = PointCloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-extent..extent),
                        rng.gen_range(-extent..extent),
                        rng.gen_range(-extent..extent),
                    )
                })
                .collect(),
        );
        let v = voxelize(&cloud, 0.05, [0.0; 3]).unwrap();
        build_pyramid(v.occupancy, scales, [0.0; 3]).unwrap()
    }

    fn assert_partition(a: &MaskAssignment, p: &VoxelPyramid) {
        for s in 0..p.num_scales() {
            let level = p.level(s).unwrap();
            let vis = a.visible(s).unwrap();
            let msk = a.masked(s).unwrap();
            assert_eq!(vis.len() + msk.len(), level.len(), "scale {s}");
            assert!(vis.is_disjoint(msk), "scale {s}");
            for (c, _) in level.iter() {
                assert!(vis.contains(c) || msk.contains(c), "scale {s}");
            }
        }
    }

    fn assert_consistent(a: &MaskAssignment) {
        for s in 0..a.num_scales().saturating_sub(1) {
            for c in a.visible(s).unwrap() {
                assert!(
                    !a.masked(s + 1).unwrap().contains(&c.parent()),
                    "visible {c:?} under masked parent"
                );
            }
        }
    }

    #[test]
    fn zero_ratio_leaves_everything_visible() {
        let p = random_pyramid(500, 2.0, 3, 4);
        let cfg = MaskingConfig::new(0.0, Strategy::Hmg, 42).unwrap();
        let a = hmg_generate(&p, &cfg).unwrap();
        for s in 0..4 {
            assert!(a.masked(s).unwrap().is_empty());
            assert_eq!(a.visible(s).unwrap().len(), p.level(s).unwrap().len());
        }
    }

    #[test]
    fn naive_full_ratio_masks_everything() {
        let p = random_pyramid(400, 2.0, 5, 4);
        let cfg = MaskingConfig::new(1.0, Strategy::NaivePoolUp, 42).unwrap();
        let a = naive_generate(&p, &cfg).unwrap();
        for s in 0..4 {
            assert!(a.visible(s).unwrap().is_empty(), "scale {s}");
            assert_eq!(a.masked(s).unwrap().len(), p.level(s).unwrap().len());
        }
    }

    #[test]
    fn partitions_and_consistency_hold_for_all_strategies() {
        for seed in 0..10u64 {
            let p = random_pyramid(300, 1.5, seed, 4);
            for strategy in [Strategy::Hmg, Strategy::NaivePoolUp, Strategy::CoarseUpsample] {
                let cfg =
                    MaskingConfig::for_total_finest_ratio(0.7, 4, strategy, seed ^ 0xabcd).unwrap();
                let a = generate(&p, &cfg).unwrap();
                assert_partition(&a, &p);
                assert_consistent(&a);
            }
        }
    }

    #[test]
    fn upsample_inherits_parent_state_exactly() {
        let p = random_pyramid(600, 2.0, 9, 4);
        let cfg = MaskingConfig::new(0.5, Strategy::CoarseUpsample, 7).unwrap();
        let a = upsample_generate(&p, &cfg).unwrap();
        for s in 0..3usize {
            for (c, _) in p.level(s).unwrap().iter() {
                let self_masked = a.masked(s).unwrap().contains(c);
                let parent_masked = a.masked(s + 1).unwrap().contains(&c.parent());
                assert_eq!(self_masked, parent_masked);
            }
        }
    }

    #[test]
    fn assignment_is_reproducible_and_order_free() {
        // Rebuilding the pyramid from a shuffled cloud yields the same
        // occupied sets, and mask decisions depend only on coordinates.
        let mut rng = StdRng::seed_from_u64(77);
        let points: Vec<Point3> = (0..500)
            .map(|_| {
                Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            })
            .collect();
        let mut shuffled = points.clone();
        shuffled.reverse();
        let build = |pts: Vec<Point3>| {
            let v = voxelize(&PointCloud::new(pts), 0.05, [0.0; 3]).unwrap();
            build_pyramid(v.occupancy, 4, [0.0; 3]).unwrap()
        };
        let cfg = MaskingConfig::new(0.3, Strategy::Hmg, 1234).unwrap();
        let a = hmg_generate(&build(points), &cfg).unwrap();
        let b = hmg_generate(&build(shuffled), &cfg).unwrap();
        for s in 0..4 {
            assert_eq!(a.visible(s).unwrap(), b.visible(s).unwrap());
            assert_eq!(a.masked(s).unwrap(), b.masked(s).unwrap());
        }
    }

    #[test]
    fn ratio_law_formulas() {
        for variant in [RatioVariant::PaperEq3, RatioVariant::Simulated] {
            assert_eq!(expected_total_ratio(0.0, 4, 0, variant).unwrap(), 0.0);
        }
        let r = 0.3;
        let paper = expected_total_ratio(r, 4, 0, RatioVariant::PaperEq3).unwrap();
        assert!((paper - (1.0 - (1.0 - r).powi(5))).abs() < 1e-15);
        let sim = expected_total_ratio(r, 4, 0, RatioVariant::Simulated).unwrap();
        assert!((sim - (1.0 - (1.0 - r).powi(4))).abs() < 1e-15);
        // At the coarsest scale the procedure applies exactly one round.
        let coarse = expected_total_ratio(r, 4, 3, RatioVariant::Simulated).unwrap();
        assert!((coarse - r).abs() < 1e-15);
    }

    #[test]
    fn rate_inversion_hits_seventy_percent() {
        let r = per_scale_rate_for_total(0.70, 4).unwrap();
        assert!((r - 0.2599172).abs() < 1e-6);
        let sim = expected_total_ratio(r, 4, 0, RatioVariant::Simulated).unwrap();
        assert!((sim - 0.70).abs() < 1e-12);
    }

    #[test]
    fn invalid_ratio_rejected() {
        assert!(MaskingConfig::new(-0.1, Strategy::Hmg, 0).is_err());
        assert!(MaskingConfig::new(1.5, Strategy::Hmg, 0).is_err());
        assert!(expected_total_ratio(0.5, 4, 4, RatioVariant::Simulated).is_err());
    }

    #[test]
    fn stats_for_all_visible_assignment() {
        let p = random_pyramid(200, 1.0, 21, 4);
        let cfg = MaskingConfig::new(0.0, Strategy::Hmg, 0).unwrap();
        let a = hmg_generate(&p, &cfg).unwrap();
        let stats = mask_stats(&a, &p, &cfg).unwrap();
        for row in &stats.rows {
            assert_eq!(row.ratio, 0.0);
            assert_eq!(row.masked, 0);
        }
        let mut csv = Vec::new();
        stats.to_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("scale,occupied,masked,ratio,eq3_paper,eq3_sim"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn encoder_input_is_visible_finest_set() {
        let p = random_pyramid(400, 1.5, 33, 4);
        let cfg = MaskingConfig::for_total_finest_ratio(0.7, 4, Strategy::Hmg, 5).unwrap();
        let a = hmg_generate(&p, &cfg).unwrap();
        let input = encoder_input(&a, &p).unwrap();
        assert_eq!(input.len(), p.level(0).unwrap().len() - a.masked(0).unwrap().len());
        for (c, payload) in input.iter() {
            assert!(!a.masked(0).unwrap().contains(c));
            assert_eq!(payload, p.level(0).unwrap().payload(c).unwrap());
        }
    }

    #[test]
    fn encoder_input_zero_ratio_is_identity() {
        let p = random_pyramid(150, 1.0, 35, 3);
        let cfg = MaskingConfig::new(0.0, Strategy::Hmg, 0).unwrap();
        let a = hmg_generate(&p, &cfg).unwrap();
        let input = encoder_input(&a, &p).unwrap();
        assert_eq!(input.sorted_coords(), p.level(0).unwrap().sorted_coords());
    }
}

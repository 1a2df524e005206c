//! Independent brute-force oracles used by tests.
//!
//! Everything here is intentionally simple and slow, and shares no dilation,
//! pooling, or convolution logic with the primary implementations it checks.
//! Dense fields are capped at small extents; callers keep scenes within a
//! 32^3 bounding box.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::geometry::{SparseOccupancy, VoxelCoord, VoxelPyramid};
use crate::masking::{hmg_generate, MaskAssignment, MaskingConfig, Strategy};
use crate::model::{Activation, ModelConfig};
use crate::neighborhood::TargetSet;
use crate::sparsenn::{Param, ParamStore};

/// Triple loop dilation: every offset of every visible voxel, minus the
/// visible set. Uses sorted vectors and binary search, not hash sets.
pub fn brute_dilate(visible: &HashSet<VoxelCoord>, radius: i32) -> Vec<VoxelCoord> {
    let mut sorted_visible: Vec<VoxelCoord> = visible.iter().copied().collect();
    sorted_visible.sort_unstable();
    let mut out = Vec::new();
    for v in &sorted_visible {
        for di in -radius..=radius {
            for dj in -radius..=radius {
                for dk in -radius..=radius {
                    let c = VoxelCoord::new(v.i + di, v.j + dj, v.k + dk, v.scale);
                    if sorted_visible.binary_search(&c).is_err() {
                        out.push(c);
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn floor_half(x: i32) -> i32 {
    // Deliberately a different route than integer euclidean division.
    (f64::from(x) / 2.0).floor() as i32
}

/// Per-voxel floor-halving of an occupancy's coordinate set.
pub fn brute_pool(occupancy: &SparseOccupancy) -> Vec<VoxelCoord> {
    let mut out: Vec<VoxelCoord> = occupancy
        .iter()
        .map(|(c, _)| VoxelCoord::new(floor_half(c.i), floor_half(c.j), floor_half(c.k), c.scale + 1))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Mean and standard deviation of the per-scale masked fraction over
/// `trials` independent HMG draws.
pub fn monte_carlo_mask_ratio(
    pyramid: &VoxelPyramid,
    rate: f64,
    trials: usize,
    base_seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if trials == 0 {
        return Err(Error::InvalidConfig("monte carlo needs at least one trial".into()));
    }
    let num_scales = pyramid.num_scales();
    let mut samples = vec![Vec::with_capacity(trials); num_scales];
    for trial in 0..trials {
        let cfg = MaskingConfig::new(rate, Strategy::Hmg, base_seed.wrapping_add(trial as u64))?;
        let assignment = hmg_generate(pyramid, &cfg)?;
        for s in 0..num_scales {
            let occupied = pyramid.level(s)?.len() as f64;
            samples[s].push(assignment.masked(s)?.len() as f64 / occupied);
        }
    }
    Ok(samples
        .into_iter()
        .map(|values| {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
            (mean, var.sqrt())
        })
        .collect())
}

/// Flat 64-bit reference for the multi-scale loss: per-scale mean of
/// elementwise stable BCE, then the weighted combination.
pub fn flat_loss_oracle(logits: &[Vec<f64>], labels: &[Vec<bool>], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    for ((z_scale, y_scale), w) in logits.iter().zip(labels).zip(weights) {
        let mut sum = 0.0;
        for (&z, &y) in z_scale.iter().zip(y_scale) {
            let yv = if y { 1.0 } else { 0.0 };
            sum += z.max(0.0) - z * yv + (-z.abs()).exp().ln_1p();
        }
        total += w * sum / z_scale.len() as f64;
    }
    total
}

// ---------------------------------------------------------------------------
// Dense forward oracle
// ---------------------------------------------------------------------------

/// Dense grid over an inclusive integer bounding box with an activity mask.
#[derive(Debug, Clone)]
pub struct DenseField {
    min: [i32; 3],
    dims: [usize; 3],
    channels: usize,
    values: Vec<f64>,
    active: Vec<bool>,
}

impl DenseField {
    fn new(min: [i32; 3], dims: [usize; 3], channels: usize) -> Self {
        let cells = dims[0] * dims[1] * dims[2];
        Self { min, dims, channels, values: vec![0.0; cells * channels], active: vec![false; cells] }
    }

    fn cell(&self, i: i32, j: i32, k: i32) -> Option<usize> {
        let x = i.checked_sub(self.min[0])?;
        let y = j.checked_sub(self.min[1])?;
        let z = k.checked_sub(self.min[2])?;
        if x < 0 || y < 0 || z < 0 {
            return None;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= self.dims[0] || y >= self.dims[1] || z >= self.dims[2] {
            return None;
        }
        Some((x * self.dims[1] + y) * self.dims[2] + z)
    }

    fn is_active(&self, i: i32, j: i32, k: i32) -> bool {
        self.cell(i, j, k).map(|c| self.active[c]).unwrap_or(false)
    }

    fn get(&self, i: i32, j: i32, k: i32, ch: usize) -> f64 {
        match self.cell(i, j, k) {
            Some(c) => self.values[c * self.channels + ch],
            None => 0.0,
        }
    }

    fn set_row(&mut self, i: i32, j: i32, k: i32, row: &[f64]) {
        let c = self.cell(i, j, k).expect("coordinate inside field bounds");
        self.active[c] = true;
        self.values[c * self.channels..(c + 1) * self.channels].copy_from_slice(row);
    }

    fn coords(&self) -> Vec<(i32, i32, i32)> {
        let mut out = Vec::new();
        for x in 0..self.dims[0] {
            for y in 0..self.dims[1] {
                for z in 0..self.dims[2] {
                    let c = (x * self.dims[1] + y) * self.dims[2] + z;
                    if self.active[c] {
                        out.push((
                            self.min[0] + x as i32,
                            self.min[1] + y as i32,
                            self.min[2] + z as i32,
                        ));
                    }
                }
            }
        }
        out
    }
}

fn act(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::Gelu => {
            let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
    }
}

fn weight_rows(params: &ParamStore<f64>, name: &str) -> Result<Vec<Vec<f64>>> {
    let m = params.matrix(name)?;
    Ok(m.rows().into_iter().map(|r| r.to_vec()).collect())
}

fn bias_vec(params: &ParamStore<f64>, name: &str) -> Result<Vec<f64>> {
    Ok(params.vector(name)?.to_vec())
}

/// Dense convolution: for every active output cell, gather `x[v + offset]`
/// from active input cells and multiply by the per-tap weight block.
/// `expand` grows the active set by `reach` before computing.
fn dense_conv(
    input: &DenseField,
    weight: &[Vec<f64>],
    bias: &[f64],
    reach: i32,
    expand: bool,
    activation: Option<Activation>,
) -> DenseField {
    let cin = input.channels;
    let cout = bias.len();
    let mut out = DenseField::new(input.min, input.dims, cout);

    for x in 0..input.dims[0] as i32 {
        for y in 0..input.dims[1] as i32 {
            for z in 0..input.dims[2] as i32 {
                let (i, j, k) = (input.min[0] + x, input.min[1] + y, input.min[2] + z);
                let active_out = if expand {
                    // Active if any input cell lies within reach.
                    let mut any = false;
                    'scan: for di in -reach..=reach {
                        for dj in -reach..=reach {
                            for dk in -reach..=reach {
                                if input.is_active(i + di, j + dj, k + dk) {
                                    any = true;
                                    break 'scan;
                                }
                            }
                        }
                    }
                    any
                } else {
                    input.is_active(i, j, k)
                };
                if !active_out {
                    continue;
                }
                let mut row = bias.to_vec();
                let mut tap = 0usize;
                for di in -reach..=reach {
                    for dj in -reach..=reach {
                        for dk in -reach..=reach {
                            if input.is_active(i + di, j + dj, k + dk) {
                                for ci in 0..cin {
                                    let v = input.get(i + di, j + dj, k + dk, ci);
                                    let wrow = &weight[tap * cin + ci];
                                    for (co, acc) in row.iter_mut().enumerate() {
                                        *acc += v * wrow[co];
                                    }
                                }
                            }
                            tap += 1;
                        }
                    }
                }
                if let Some(kind) = activation {
                    for v in &mut row {
                        *v = act(kind, *v);
                    }
                }
                out.set_row(i, j, k, &row);
            }
        }
    }
    out
}

fn dense_linear(
    input: &DenseField,
    weight: &[Vec<f64>],
    bias: &[f64],
    activation: Option<Activation>,
) -> DenseField {
    let cout = bias.len();
    let mut out = DenseField::new(input.min, input.dims, cout);
    for (i, j, k) in input.coords() {
        let mut row = bias.to_vec();
        for (ci, wrow) in weight.iter().enumerate() {
            let v = input.get(i, j, k, ci);
            for (co, acc) in row.iter_mut().enumerate() {
                *acc += v * wrow[co];
            }
        }
        if let Some(kind) = activation {
            for v in &mut row {
                *v = act(kind, *v);
            }
        }
        out.set_row(i, j, k, &row);
    }
    out
}

fn dense_pool(input: &DenseField) -> DenseField {
    let min = [floor_half(input.min[0]), floor_half(input.min[1]), floor_half(input.min[2])];
    let hi = [
        floor_half(input.min[0] + input.dims[0] as i32 - 1),
        floor_half(input.min[1] + input.dims[1] as i32 - 1),
        floor_half(input.min[2] + input.dims[2] as i32 - 1),
    ];
    let dims = [
        (hi[0] - min[0] + 1) as usize,
        (hi[1] - min[1] + 1) as usize,
        (hi[2] - min[2] + 1) as usize,
    ];
    let mut out = DenseField::new(min, dims, input.channels);
    for px in 0..dims[0] as i32 {
        for py in 0..dims[1] as i32 {
            for pz in 0..dims[2] as i32 {
                let (pi, pj, pk) = (min[0] + px, min[1] + py, min[2] + pz);
                let mut row = vec![0.0; input.channels];
                let mut count = 0usize;
                for (ci, cj, ck) in children_of(pi, pj, pk) {
                    if input.is_active(ci, cj, ck) {
                        count += 1;
                        for ch in 0..input.channels {
                            row[ch] += input.get(ci, cj, ck, ch);
                        }
                    }
                }
                if count > 0 {
                    for v in &mut row {
                        *v /= count as f64;
                    }
                    out.set_row(pi, pj, pk, &row);
                }
            }
        }
    }
    out
}

fn children_of(i: i32, j: i32, k: i32) -> Vec<(i32, i32, i32)> {
    let mut out = Vec::with_capacity(8);
    for d in 0..8 {
        out.push((2 * i + (d & 1), 2 * j + ((d >> 1) & 1), 2 * k + ((d >> 2) & 1)));
    }
    out
}

fn dense_unpool(coarse: &DenseField, fine_like: &DenseField) -> DenseField {
    let mut out = DenseField::new(fine_like.min, fine_like.dims, coarse.channels);
    for (i, j, k) in fine_like.coords() {
        let (pi, pj, pk) = (floor_half(i), floor_half(j), floor_half(k));
        let row: Vec<f64> = (0..coarse.channels).map(|ch| coarse.get(pi, pj, pk, ch)).collect();
        out.set_row(i, j, k, &row);
    }
    out
}

fn dense_concat(a: &DenseField, b: &DenseField) -> DenseField {
    let mut out = DenseField::new(a.min, a.dims, a.channels + b.channels);
    for (i, j, k) in a.coords() {
        let mut row = Vec::with_capacity(out.channels);
        for ch in 0..a.channels {
            row.push(a.get(i, j, k, ch));
        }
        for ch in 0..b.channels {
            row.push(b.get(i, j, k, ch));
        }
        out.set_row(i, j, k, &row);
    }
    out
}

fn bbox(coords: impl Iterator<Item = VoxelCoord>, margin: i32) -> Option<([i32; 3], [usize; 3])> {
    let mut min = [i32::MAX; 3];
    let mut max = [i32::MIN; 3];
    let mut any = false;
    for c in coords {
        any = true;
        min[0] = min[0].min(c.i);
        min[1] = min[1].min(c.j);
        min[2] = min[2].min(c.k);
        max[0] = max[0].max(c.i);
        max[1] = max[1].max(c.j);
        max[2] = max[2].max(c.k);
    }
    if !any {
        return None;
    }
    let min = [min[0] - margin, min[1] - margin, min[2] - margin];
    let dims = [
        (max[0] + margin - min[0] + 1) as usize,
        (max[1] + margin - min[1] + 1) as usize,
        (max[2] + margin - min[2] + 1) as usize,
    ];
    Some((min, dims))
}

/// Full-model dense mirror of the sparse forward pass: returns per-scale
/// logits aligned with the target coordinate order.
pub fn dense_forward(
    params: &ParamStore<f64>,
    cfg: &ModelConfig,
    visible: &SparseOccupancy,
    assignment: &MaskAssignment,
    targets: &TargetSet,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let margin = cfg.decoder_layers as i32 * cfg.decoder_reach;

    // Encoder input field at the finest scale.
    let coords = visible.sorted_coords();
    let (min, dims) = bbox(coords.iter().copied(), 0)
        .ok_or(Error::EmptyInput("dense oracle: no visible voxels"))?;
    let mut field = DenseField::new(min, dims, crate::model::INPUT_CHANNELS);
    for c in &coords {
        let p = visible.payload(c).expect("sorted coord present");
        field.set_row(
            c.i,
            c.j,
            c.k,
            &[
                f64::from(p.count).ln_1p(),
                p.centroid[0],
                p.centroid[1],
                p.centroid[2],
            ],
        );
    }

    // Encoder pyramid.
    let mut feature_fields = Vec::with_capacity(cfg.num_scales);
    for s in 0..cfg.num_scales {
        for b in 0..cfg.encoder_blocks {
            let w = weight_rows(params, &format!("enc.s{s}.b{b}.w"))?;
            let bias = bias_vec(params, &format!("enc.s{s}.b{b}.b"))?;
            field = dense_conv(&field, &w, &bias, 1, false, Some(cfg.activation));
        }
        feature_fields.push(field.clone());
        if s + 1 < cfg.num_scales {
            field = dense_pool(&field);
        }
    }

    // Coarse-to-fine fusion.
    let mut fused: Vec<Option<DenseField>> = vec![None; cfg.num_scales];
    for s in (0..cfg.num_scales).rev() {
        let pre = if s + 1 < cfg.num_scales {
            let up = dense_unpool(fused[s + 1].as_ref().expect("computed"), &feature_fields[s]);
            let cat = dense_concat(&feature_fields[s], &up);
            let w = weight_rows(params, &format!("fuse.s{s}.proj.w"))?;
            let bias = bias_vec(params, &format!("fuse.s{s}.proj.b"))?;
            dense_linear(&cat, &w, &bias, None)
        } else {
            feature_fields[s].clone()
        };
        let w = weight_rows(params, &format!("fuse.s{s}.w"))?;
        let bias = bias_vec(params, &format!("fuse.s{s}.b"))?;
        fused[s] = Some(dense_conv(&pre, &w, &bias, 1, false, Some(cfg.activation)));
    }

    // Per-scale decoders.
    let mut logits = Vec::with_capacity(cfg.num_scales);
    for s in 0..cfg.num_scales {
        let fused_field = fused[s].as_ref().expect("computed");
        let mut pad_coords: Vec<VoxelCoord> = assignment.visible(s)?.iter().copied().collect();
        pad_coords.sort_unstable();

        // Re-home into a padded field covering the visible set plus margin.
        let fused_coords: Vec<(i32, i32, i32)> = fused_field.coords();
        let all = fused_coords
            .iter()
            .map(|&(i, j, k)| VoxelCoord::new(i, j, k, s as u8))
            .chain(pad_coords.iter().copied());
        let (dmin, ddims) = bbox(all, margin).ok_or(Error::EmptyInput("dense oracle: empty scale"))?;
        let mut d = DenseField::new(dmin, ddims, fused_field.channels);
        for &(i, j, k) in &fused_coords {
            let row: Vec<f64> = (0..fused_field.channels).map(|ch| fused_field.get(i, j, k, ch)).collect();
            d.set_row(i, j, k, &row);
        }
        for c in &pad_coords {
            if !d.is_active(c.i, c.j, c.k) {
                d.set_row(c.i, c.j, c.k, &vec![0.0; fused_field.channels]);
            }
        }

        for l in 0..cfg.decoder_layers {
            let w = weight_rows(params, &format!("dec.s{s}.exp{l}.w"))?;
            let bias = bias_vec(params, &format!("dec.s{s}.exp{l}.b"))?;
            d = dense_conv(&d, &w, &bias, cfg.decoder_reach, true, Some(cfg.activation));
        }
        for l in 0..cfg.head_depth {
            let w = weight_rows(params, &format!("dec.s{s}.head{l}.w"))?;
            let bias = bias_vec(params, &format!("dec.s{s}.head{l}.b"))?;
            d = dense_conv(&d, &w, &bias, 1, false, Some(cfg.activation));
        }
        let w = weight_rows(params, &format!("dec.s{s}.out.w"))?;
        let bias = bias_vec(params, &format!("dec.s{s}.out.b"))?;
        let out = dense_linear(&d, &w, &bias, None);

        let st = targets.scale(s)?;
        let mut scale_logits = Vec::with_capacity(st.len());
        for c in &st.coords {
            if !out.is_active(c.i, c.j, c.k) {
                return Err(Error::Coverage { i: c.i, j: c.j, k: c.k, scale: c.scale });
            }
            scale_logits.push(out.get(c.i, c.j, c.k, 0));
        }
        logits.push(scale_logits);
    }
    Ok(logits)
}

/// Identity-weight helper for conv oracles in tests.
pub fn identity_conv_matrix(reach: i32, channels: usize) -> Param<f64> {
    let taps = ((2 * reach + 1).pow(3)) as usize;
    let center = (taps - 1) / 2;
    let mut w = ndarray::Array2::zeros((taps * channels, channels));
    for c in 0..channels {
        w[(center * channels + c, c)] = 1.0;
    }
    Param::Matrix(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_pyramid, voxelize, Point3, PointCloud};
    use crate::neighborhood::dilate;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn brute_dilate_single_voxel() {
        let visible: HashSet<VoxelCoord> = [VoxelCoord::new(0, 0, 0, 0)].into_iter().collect();
        assert_eq!(brute_dilate(&visible, 1).len(), 26);
    }

    #[test]
    fn brute_dilate_matches_primary() {
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..20 {
            let visible: HashSet<VoxelCoord> = (0..rng.gen_range(1..200))
                .map(|_| {
                    VoxelCoord::new(
                        rng.gen_range(-15..15),
                        rng.gen_range(-15..15),
                        rng.gen_range(-15..15),
                        0,
                    )
                })
                .collect();
            let radius = rng.gen_range(1..=4);
            let mut primary: Vec<VoxelCoord> = dilate(&visible, radius).unwrap().into_iter().collect();
            primary.sort_unstable();
            assert_eq!(primary, brute_dilate(&visible, radius));
        }
    }

    #[test]
    fn brute_pool_matches_pyramid_and_increments_scale() {
        let mut rng = StdRng::seed_from_u64(7);
        let cloud = PointCloud::new(
            (0..500)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                    )
                })
                .collect(),
        );
        let v = voxelize(&cloud, 0.05, [0.0; 3]).unwrap();
        let pyramid = build_pyramid(v.occupancy, 4, [0.0; 3]).unwrap();
        for s in 0..3usize {
            let pooled = brute_pool(pyramid.level(s).unwrap());
            assert!(pooled.iter().all(|c| c.scale == s as u8 + 1));
            let expected = pyramid.level(s + 1).unwrap().sorted_coords();
            assert_eq!(pooled, expected, "scale {s}");
        }
    }

    #[test]
    fn monte_carlo_zero_rate_is_zero() {
        let cloud = PointCloud::new(vec![Point3::new(0.01, 0.01, 0.01)]);
        let v = voxelize(&cloud, 0.05, [0.0; 3]).unwrap();
        let pyramid = build_pyramid(v.occupancy, 3, [0.0; 3]).unwrap();
        let stats = monte_carlo_mask_ratio(&pyramid, 0.0, 10, 0).unwrap();
        for (mean, sigma) in stats {
            assert_eq!(mean, 0.0);
            assert_eq!(sigma, 0.0);
        }
    }
}

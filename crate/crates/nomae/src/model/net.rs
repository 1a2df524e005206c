//! Network construction and the full forward pass.
//!
//! The encoder consumes only the finest-scale visible voxels and produces a
//! feature pyramid by submanifold blocks and mean pooling. The upsampler
//! fuses coarse features into fine ones (concat + projection + one block per
//! scale). Each scale then runs its own decoder: the fused features are
//! extended with zero rows at the remaining visible voxels of that scale,
//! pushed through `m` expansion layers and `c` submanifold head layers, and
//! projected to one logit per active voxel, restricted to the target set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::SparseOccupancy;
use crate::masking::MaskAssignment;
use crate::model::{Activation, ModelConfig};
use crate::neighborhood::TargetSet;
use crate::sparsenn::{Graph, GradStore, NodeId, ParamStore, Scalar, SparseFeatureMap};

/// Raw per-voxel input features: log1p(point count) and the centroid offset.
pub const INPUT_CHANNELS: usize = 4;

/// Assemble the encoder input map from the visible occupancy.
pub fn input_features<T: Scalar>(visible: &SparseOccupancy) -> Result<SparseFeatureMap<T>> {
    if visible.is_empty() {
        return Err(Error::EmptyInput("encoder input has no visible voxels"));
    }
    let coords = visible.sorted_coords();
    let mut feats = ndarray::Array2::zeros((coords.len(), INPUT_CHANNELS));
    for (row, c) in coords.iter().enumerate() {
        let payload = visible.payload(c).expect("sorted coord present");
        feats[(row, 0)] = T::from_f64(f64::from(payload.count).ln_1p());
        for axis in 0..3 {
            feats[(row, 1 + axis)] = T::from_f64(payload.centroid[axis]);
        }
    }
    SparseFeatureMap::new(0, coords, feats)
}

fn conv_taps(reach: i32) -> usize {
    ((2 * reach + 1).pow(3)) as usize
}

/// Create and initialize every parameter tensor of the model.
///
/// Weights are uniform in `±sqrt(6 / fan_in)` with fan-in counted over kernel
/// taps times input channels; biases start at zero. Draw order is fixed, so a
/// seed fully determines the network.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let taps1 = conv_taps(1);
    let taps_e = conv_taps(cfg.decoder_reach);

    for s in 0..cfg.num_scales {
        let mut in_ch = if s == 0 { INPUT_CHANNELS } else { cfg.channels[s - 1] };
        for b in 0..cfg.encoder_blocks {
            let out_ch = cfg.channels[s];
            params.init_matrix(
                format!("enc.s{s}.b{b}.w"),
                taps1 * in_ch,
                out_ch,
                taps1 * in_ch,
                &mut rng,
            );
            params.init_zero_vector(format!("enc.s{s}.b{b}.b"), out_ch);
            in_ch = out_ch;
        }
    }

    for s in (0..cfg.num_scales).rev() {
        let ch = cfg.channels[s];
        if s + 1 < cfg.num_scales {
            let cat = ch + cfg.channels[s + 1];
            params.init_matrix(format!("fuse.s{s}.proj.w"), cat, ch, cat, &mut rng);
            params.init_zero_vector(format!("fuse.s{s}.proj.b"), ch);
        }
        params.init_matrix(format!("fuse.s{s}.w"), taps1 * ch, ch, taps1 * ch, &mut rng);
        params.init_zero_vector(format!("fuse.s{s}.b"), ch);
    }

    for s in 0..cfg.num_scales {
        let ch = cfg.channels[s];
        for l in 0..cfg.decoder_layers {
            params.init_matrix(
                format!("dec.s{s}.exp{l}.w"),
                taps_e * ch,
                ch,
                taps_e * ch,
                &mut rng,
            );
            params.init_zero_vector(format!("dec.s{s}.exp{l}.b"), ch);
        }
        for l in 0..cfg.head_depth {
            params.init_matrix(
                format!("dec.s{s}.head{l}.w"),
                taps1 * ch,
                ch,
                taps1 * ch,
                &mut rng,
            );
            params.init_zero_vector(format!("dec.s{s}.head{l}.b"), ch);
        }
        params.init_matrix(format!("dec.s{s}.out.w"), ch, 1, ch, &mut rng);
        params.init_zero_vector(format!("dec.s{s}.out.b"), 1);
    }

    Ok(params)
}

/// Set each decoder's output bias to the logit of the positive fraction in
/// `targets`, as an empty-class prior for imbalanced neighborhoods.
pub fn init_prior_bias<T: Scalar>(
    params: &mut ParamStore<T>,
    cfg: &ModelConfig,
    targets: &[&TargetSet],
) -> Result<()> {
    for s in 0..cfg.num_scales {
        let mut positives = 0usize;
        let mut total = 0usize;
        for t in targets {
            let st = t.scale(s)?;
            positives += st.positives();
            total += st.len();
        }
        if total == 0 {
            continue;
        }
        let q = (positives as f64 / total as f64).clamp(1e-4, 1.0 - 1e-4);
        let logit = (q / (1.0 - q)).ln();
        match params.get_mut(&format!("dec.s{s}.out.b"))? {
            crate::sparsenn::Param::Vector(v) => v[0] = T::from_f64(logit),
            _ => return Err(Error::Shape("decoder output bias must be a vector".into())),
        }
    }
    Ok(())
}

/// A completed forward pass: the graph plus handles to the logits and loss.
pub struct ForwardRun<'p, T: Scalar> {
    pub graph: Graph<'p, T>,
    pub features: Vec<NodeId>,
    pub fused: Vec<NodeId>,
    pub logits: Vec<NodeId>,
    pub scale_losses: Vec<NodeId>,
    pub loss: NodeId,
}

impl<'p, T: Scalar> ForwardRun<'p, T> {
    pub fn loss_value(&self) -> T {
        self.graph.scalar(self.loss).expect("loss node is scalar")
    }

    pub fn scale_loss_values(&self) -> Vec<T> {
        self.scale_losses
            .iter()
            .map(|&id| self.graph.scalar(id).expect("scale loss is scalar"))
            .collect()
    }

    pub fn logits_map(&self, scale: usize) -> Result<&SparseFeatureMap<T>> {
        let id = *self
            .logits
            .get(scale)
            .ok_or(Error::InvalidScale { scale, num_scales: self.logits.len() })?;
        self.graph.map(id)
    }

    pub fn backward(&self) -> Result<GradStore<T>> {
        self.graph.backward(self.loss)
    }
}

fn activation<T: Scalar>(graph: &mut Graph<'_, T>, act: Activation, x: NodeId) -> Result<NodeId> {
    match act {
        Activation::Relu => graph.relu(x),
        Activation::Gelu => graph.gelu(x),
    }
}

/// Run encoder, upsampler, all per-scale decoders, and the multi-scale loss.
pub fn run_forward<'p, T: Scalar>(
    params: &'p ParamStore<T>,
    cfg: &ModelConfig,
    visible: &SparseOccupancy,
    assignment: &MaskAssignment,
    targets: &TargetSet,
) -> Result<ForwardRun<'p, T>> {
    cfg.validate()?;
    if assignment.num_scales() != cfg.num_scales || targets.num_scales() != cfg.num_scales {
        return Err(Error::InvalidConfig(format!(
            "scale mismatch: model {}, assignment {}, targets {}",
            cfg.num_scales,
            assignment.num_scales(),
            targets.num_scales()
        )));
    }
    let mut graph = Graph::new(params);

    // Encoder: blocks at each scale, then pool to the next.
    let mut features = Vec::with_capacity(cfg.num_scales);
    let mut x = graph.input(input_features(visible)?);
    for s in 0..cfg.num_scales {
        for b in 0..cfg.encoder_blocks {
            let conv = graph.submanifold_conv(
                x,
                &format!("enc.s{s}.b{b}.w"),
                Some(&format!("enc.s{s}.b{b}.b")),
                1,
            )?;
            x = activation(&mut graph, cfg.activation, conv)?;
        }
        features.push(x);
        if s + 1 < cfg.num_scales {
            x = graph.pool_down(x)?;
        }
    }

    // Upsampler: coarse-to-fine fusion, one block per scale.
    let mut fused_rev: Vec<NodeId> = Vec::with_capacity(cfg.num_scales);
    for s in (0..cfg.num_scales).rev() {
        let pre = match fused_rev.last().copied() {
            Some(coarser) => {
                let fine_coords = graph.map(features[s])?.coords().to_vec();
                let up = graph.unpool_up(coarser, &fine_coords)?;
                let cat = graph.concat(features[s], up)?;
                graph.linear(cat, &format!("fuse.s{s}.proj.w"), Some(&format!("fuse.s{s}.proj.b")))?
            }
            None => features[s],
        };
        let conv =
            graph.submanifold_conv(pre, &format!("fuse.s{s}.w"), Some(&format!("fuse.s{s}.b")), 1)?;
        fused_rev.push(activation(&mut graph, cfg.activation, conv)?);
    }
    fused_rev.reverse();
    let fused = fused_rev;

    // Per-scale decoders with separate weights.
    let weights = cfg.normalized_loss_weights();
    let mut logits = Vec::with_capacity(cfg.num_scales);
    let mut scale_losses = Vec::with_capacity(cfg.num_scales);
    for s in 0..cfg.num_scales {
        let st = targets.scale(s)?;
        if st.is_empty() {
            return Err(Error::EmptyScale { scale: s });
        }
        // The decoder expands from every visible voxel of this scale; voxels
        // without pooled encoder evidence enter as zero rows so the active
        // set covers the whole neighborhood.
        let pad_coords = assignment.visible_sorted(s)?;
        let mut d = graph.pad_zeros(fused[s], &pad_coords)?;
        for l in 0..cfg.decoder_layers {
            let conv = graph.expansion_conv(
                d,
                &format!("dec.s{s}.exp{l}.w"),
                Some(&format!("dec.s{s}.exp{l}.b")),
                cfg.decoder_reach,
            )?;
            d = activation(&mut graph, cfg.activation, conv)?;
        }
        for l in 0..cfg.head_depth {
            let conv = graph.submanifold_conv(
                d,
                &format!("dec.s{s}.head{l}.w"),
                Some(&format!("dec.s{s}.head{l}.b")),
                1,
            )?;
            d = activation(&mut graph, cfg.activation, conv)?;
        }
        let full = graph.linear(d, &format!("dec.s{s}.out.w"), Some(&format!("dec.s{s}.out.b")))?;
        let restricted = graph.restrict(full, &st.coords)?;
        logits.push(restricted);
        scale_losses.push(graph.bce_mean(restricted, &st.labels)?);
    }

    let terms: Vec<(NodeId, f64)> =
        scale_losses.iter().copied().zip(weights.iter().copied()).collect();
    let loss = graph.scalar_weighted_sum(&terms)?;

    Ok(ForwardRun { graph, features, fused, logits, scale_losses, loss })
}

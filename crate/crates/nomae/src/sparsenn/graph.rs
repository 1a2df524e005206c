//! Define-by-run compute graph over sparse feature maps.
//!
//! Ops execute eagerly and record enough state (coordinate rulebooks, saved
//! activations) to run an exact reverse pass. Sparse convolutions are
//! implemented gather/GEMM/scatter per kernel offset; all row traversals are
//! in fixed sorted order so losses and gradients are bit-reproducible.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::geometry::VoxelCoord;
use crate::sparsenn::map::SparseFeatureMap;
use crate::sparsenn::params::{GradStore, ParamStore};
use crate::sparsenn::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Kernel offsets within Chebyshev radius `reach`, in lexicographic order.
pub fn kernel_offsets(reach: i32) -> Vec<(i32, i32, i32)> {
    let mut out = Vec::with_capacity(((2 * reach + 1).pow(3)) as usize);
    for di in -reach..=reach {
        for dj in -reach..=reach {
            for dk in -reach..=reach {
                out.push((di, dj, dk));
            }
        }
    }
    out
}

/// Per-tap gather/scatter row pairs: `out[out_rows[p]] += x[in_rows[p]] * W_t`.
#[derive(Debug, Clone, Default)]
struct TapPairs {
    out_rows: Vec<usize>,
    in_rows: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Rulebook {
    taps: Vec<TapPairs>,
}

fn build_rulebook(
    out_coords: &[VoxelCoord],
    input: &SparseFeatureMap<impl Scalar>,
    reach: i32,
) -> Rulebook {
    let offsets = kernel_offsets(reach);
    let mut taps = vec![TapPairs::default(); offsets.len()];
    for (row, c) in out_coords.iter().enumerate() {
        for (t, &(di, dj, dk)) in offsets.iter().enumerate() {
            if let Some(in_row) = input.row_of(&c.offset(di, dj, dk)) {
                taps[t].out_rows.push(row);
                taps[t].in_rows.push(in_row as usize);
            }
        }
    }
    Rulebook { taps }
}

#[derive(Debug)]
enum Op {
    Input,
    Conv { weight: String, bias: Option<String>, rulebook: Rulebook },
    PoolDown { parent_of_child: Vec<usize>, child_counts: Vec<usize> },
    UnpoolUp { parent_of_fine: Vec<usize>, coarse_rows: usize },
    Linear { weight: String, bias: Option<String> },
    Relu,
    Gelu,
    Add,
    Concat { split: usize },
    Restrict { rows: Vec<usize>, input_rows: usize },
    PadZeros { src_rows: Vec<Option<usize>>, input_rows: usize },
    BceMean { labels: Vec<bool> },
    ScalarWeightedSum { weights: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv { .. } => "conv",
            Op::PoolDown { .. } => "pool_down",
            Op::UnpoolUp { .. } => "unpool_up",
            Op::Linear { .. } => "linear",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Add => "add",
            Op::Concat { .. } => "concat",
            Op::Restrict { .. } => "restrict",
            Op::PadZeros { .. } => "pad_zeros",
            Op::BceMean { .. } => "bce_mean",
            Op::ScalarWeightedSum { .. } => "scalar_weighted_sum",
        }
    }
}

#[derive(Debug)]
enum Value<T: Scalar> {
    Map(SparseFeatureMap<T>),
    Scalar(T),
}

struct Node<T: Scalar> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Value<T>,
}

enum Grad<T: Scalar> {
    Map(Array2<T>),
    Scalar(T),
}

/// Recorded forward pass over a fixed parameter store.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Value<T>) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    /// Feature map held by a node.
    pub fn map(&self, id: NodeId) -> Result<&SparseFeatureMap<T>> {
        match &self.node(id).value {
            Value::Map(m) => Ok(m),
            Value::Scalar(_) => Err(Error::Shape("node holds a scalar, not a map".into())),
        }
    }

    /// Scalar held by a node.
    pub fn scalar(&self, id: NodeId) -> Result<T> {
        match &self.node(id).value {
            Value::Scalar(v) => Ok(*v),
            Value::Map(_) => Err(Error::Shape("node holds a map, not a scalar".into())),
        }
    }

    pub fn input(&mut self, map: SparseFeatureMap<T>) -> NodeId {
        self.push(Op::Input, vec![], Value::Map(map))
    }

    fn conv_common(
        &mut self,
        x: NodeId,
        weight: &str,
        bias: Option<&str>,
        reach: i32,
        out_coords: Vec<VoxelCoord>,
    ) -> Result<NodeId> {
        let input = self.map(x)?;
        let cin = input.channels();
        let taps = (2 * reach + 1).pow(3) as usize;
        let w = self.params.matrix(weight)?;
        if w.nrows() != taps * cin {
            return Err(Error::Shape(format!(
                "weight {weight} has {} rows, expected {} taps x {} channels",
                w.nrows(),
                taps,
                cin
            )));
        }
        let cout = w.ncols();
        if let Some(b) = bias {
            let b = self.params.vector(b)?;
            if b.len() != cout {
                return Err(Error::Shape(format!(
                    "bias has {} entries, weight {weight} has {cout} output channels",
                    b.len()
                )));
            }
        }

        let rulebook = build_rulebook(&out_coords, input, reach);
        let mut y: Array2<T> = Array2::zeros((out_coords.len(), cout));
        for (t, tap) in rulebook.taps.iter().enumerate() {
            if tap.out_rows.is_empty() {
                continue;
            }
            let w_t = w.slice(s![t * cin..(t + 1) * cin, ..]);
            let x_sel = input.features().select(Axis(0), &tap.in_rows);
            let part = x_sel.dot(&w_t);
            for (r, &out_row) in tap.out_rows.iter().enumerate() {
                let mut row = y.row_mut(out_row);
                row += &part.row(r);
            }
        }
        if let Some(b) = bias {
            let b = self.params.vector(b)?;
            y += &b.view().insert_axis(Axis(0));
        }

        let scale = input.scale();
        let out_map = SparseFeatureMap::new(scale, out_coords, y)?;
        Ok(self.push(
            Op::Conv {
                weight: weight.to_string(),
                bias: bias.map(str::to_string),
                rulebook,
            },
            vec![x],
            Value::Map(out_map),
        ))
    }

    /// Sparse convolution whose output coordinates equal its input
    /// coordinates; absent neighbors contribute zero.
    pub fn submanifold_conv(
        &mut self,
        x: NodeId,
        weight: &str,
        bias: Option<&str>,
        reach: i32,
    ) -> Result<NodeId> {
        let out_coords = self.map(x)?.coords().to_vec();
        self.conv_common(x, weight, bias, reach, out_coords)
    }

    /// Generative convolution: output coordinates are the input set dilated
    /// by `reach` (union with the input set itself).
    pub fn expansion_conv(
        &mut self,
        x: NodeId,
        weight: &str,
        bias: Option<&str>,
        reach: i32,
    ) -> Result<NodeId> {
        if reach < 1 {
            return Err(Error::InvalidConfig(format!("expansion reach {reach} must be >= 1")));
        }
        let input = self.map(x)?;
        let mut out: Vec<VoxelCoord> = Vec::with_capacity(input.num_coords() * 8);
        for c in input.coords() {
            for (di, dj, dk) in kernel_offsets(reach) {
                out.push(c.offset(di, dj, dk));
            }
        }
        out.sort_unstable();
        out.dedup();
        self.conv_common(x, weight, bias, reach, out)
    }

    /// Mean-pool features into the parent voxels one scale coarser.
    pub fn pool_down(&mut self, x: NodeId) -> Result<NodeId> {
        let input = self.map(x)?;
        let mut parents: Vec<VoxelCoord> = input.coords().iter().map(VoxelCoord::parent).collect();
        parents.sort_unstable();
        parents.dedup();
        let parent_index: HashMap<VoxelCoord, usize> =
            parents.iter().enumerate().map(|(r, c)| (*c, r)).collect();

        let mut parent_of_child = Vec::with_capacity(input.num_coords());
        let mut child_counts = vec![0usize; parents.len()];
        let mut sums: Array2<T> = Array2::zeros((parents.len(), input.channels()));
        for (row, c) in input.coords().iter().enumerate() {
            let p = parent_index[&c.parent()];
            parent_of_child.push(p);
            child_counts[p] += 1;
            let mut target = sums.row_mut(p);
            target += &input.features().row(row);
        }
        for (p, &count) in child_counts.iter().enumerate() {
            let inv = T::from_f64(1.0 / count as f64);
            let mut row = sums.row_mut(p);
            row *= inv;
        }

        let scale = input.scale() + 1;
        let out_map = SparseFeatureMap::new(scale, parents, sums)?;
        Ok(self.push(
            Op::PoolDown { parent_of_child, child_counts },
            vec![x],
            Value::Map(out_map),
        ))
    }

    /// Broadcast each fine coordinate's parent feature down to it.
    pub fn unpool_up(&mut self, coarse: NodeId, fine_coords: &[VoxelCoord]) -> Result<NodeId> {
        let input = self.map(coarse)?;
        let mut parent_of_fine = Vec::with_capacity(fine_coords.len());
        let mut y: Array2<T> = Array2::zeros((fine_coords.len(), input.channels()));
        for (row, c) in fine_coords.iter().enumerate() {
            let parent = c.parent();
            let p = input.row_of(&parent).ok_or(Error::MissingParent {
                i: c.i,
                j: c.j,
                k: c.k,
                scale: c.scale,
            })? as usize;
            parent_of_fine.push(p);
            y.row_mut(row).assign(&input.features().row(p));
        }
        let scale = input.scale() - 1;
        let out_map = SparseFeatureMap::new(scale, fine_coords.to_vec(), y)?;
        Ok(self.push(
            Op::UnpoolUp { parent_of_fine, coarse_rows: input.num_coords() },
            vec![coarse],
            Value::Map(out_map),
        ))
    }

    /// Per-row linear layer `y = x W + b`.
    pub fn linear(&mut self, x: NodeId, weight: &str, bias: Option<&str>) -> Result<NodeId> {
        let input = self.map(x)?;
        let w = self.params.matrix(weight)?;
        if w.nrows() != input.channels() {
            return Err(Error::Shape(format!(
                "linear weight {weight} expects {} channels, map has {}",
                w.nrows(),
                input.channels()
            )));
        }
        let mut y = input.features().dot(w);
        if let Some(b) = bias {
            let b = self.params.vector(b)?;
            if b.len() != y.ncols() {
                return Err(Error::Shape(format!("bias has {} entries, output has {}", b.len(), y.ncols())));
            }
            y += &b.view().insert_axis(Axis(0));
        }
        let out_map = input.with_features(y)?;
        Ok(self.push(
            Op::Linear { weight: weight.to_string(), bias: bias.map(str::to_string) },
            vec![x],
            Value::Map(out_map),
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let input = self.map(x)?;
        let y = input.features().mapv(|v| if v > T::zero() { v } else { T::zero() });
        let out_map = input.with_features(y)?;
        Ok(self.push(Op::Relu, vec![x], Value::Map(out_map)))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let input = self.map(x)?;
        let y = input.features().mapv(gelu_forward);
        let out_map = input.with_features(y)?;
        Ok(self.push(Op::Gelu, vec![x], Value::Map(out_map)))
    }

    fn check_aligned(&self, a: NodeId, b: NodeId) -> Result<()> {
        let (ma, mb) = (self.map(a)?, self.map(b)?);
        if ma.coords() != mb.coords() {
            return Err(Error::Alignment(format!(
                "coordinate sets differ ({} vs {} coords)",
                ma.num_coords(),
                mb.num_coords()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_aligned(a, b)?;
        let (ma, mb) = (self.map(a)?, self.map(b)?);
        if ma.channels() != mb.channels() {
            return Err(Error::Shape("add requires equal channel counts".into()));
        }
        let y = ma.features() + mb.features();
        let out_map = ma.with_features(y)?;
        Ok(self.push(Op::Add, vec![a, b], Value::Map(out_map)))
    }

    /// Channel concatenation over identical coordinate sets.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_aligned(a, b)?;
        let (ma, mb) = (self.map(a)?, self.map(b)?);
        let split = ma.channels();
        let mut y: Array2<T> = Array2::zeros((ma.num_coords(), split + mb.channels()));
        y.slice_mut(s![.., ..split]).assign(ma.features());
        y.slice_mut(s![.., split..]).assign(mb.features());
        let out_map = ma.with_features(y)?;
        Ok(self.push(Op::Concat { split }, vec![a, b], Value::Map(out_map)))
    }

    /// Select the rows of `coords` (sorted, unique) from `x`. Missing
    /// coordinates are a coverage violation.
    pub fn restrict(&mut self, x: NodeId, coords: &[VoxelCoord]) -> Result<NodeId> {
        let input = self.map(x)?;
        let mut rows = Vec::with_capacity(coords.len());
        for c in coords {
            match input.row_of(c) {
                Some(r) => rows.push(r as usize),
                None => {
                    return Err(Error::Coverage { i: c.i, j: c.j, k: c.k, scale: c.scale });
                }
            }
        }
        let y = input.features().select(Axis(0), &rows);
        let out_map = SparseFeatureMap::new(input.scale(), coords.to_vec(), y)?;
        Ok(self.push(
            Op::Restrict { rows, input_rows: input.num_coords() },
            vec![x],
            Value::Map(out_map),
        ))
    }

    /// Extend the coordinate set with zero-feature rows at `extra`.
    pub fn pad_zeros(&mut self, x: NodeId, extra: &[VoxelCoord]) -> Result<NodeId> {
        let input = self.map(x)?;
        let mut union: Vec<VoxelCoord> = input.coords().to_vec();
        union.extend_from_slice(extra);
        union.sort_unstable();
        union.dedup();
        let mut src_rows = Vec::with_capacity(union.len());
        let mut y: Array2<T> = Array2::zeros((union.len(), input.channels()));
        for (row, c) in union.iter().enumerate() {
            let src = input.row_of(c).map(|r| r as usize);
            if let Some(r) = src {
                y.row_mut(row).assign(&input.features().row(r));
            }
            src_rows.push(src);
        }
        let out_map = SparseFeatureMap::new(input.scale(), union, y)?;
        Ok(self.push(
            Op::PadZeros { src_rows, input_rows: input.num_coords() },
            vec![x],
            Value::Map(out_map),
        ))
    }

    /// Mean binary cross-entropy with logits over a single-channel map, in
    /// the overflow-free form `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_mean(&mut self, logits: NodeId, labels: &[bool]) -> Result<NodeId> {
        let input = self.map(logits)?;
        if input.channels() != 1 {
            return Err(Error::Shape(format!(
                "bce expects 1 channel, got {}",
                input.channels()
            )));
        }
        if input.num_coords() != labels.len() {
            return Err(Error::Alignment(format!(
                "{} logits vs {} labels",
                input.num_coords(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::EmptyInput("bce over zero elements"));
        }
        let mut total = T::zero();
        for (row, &label) in labels.iter().enumerate() {
            let z = input.features()[(row, 0)];
            total += bce_element(z, label);
        }
        let value = total / T::from_f64(labels.len() as f64);
        if !value.is_finite() {
            return Err(Error::Numerical { node: self.nodes.len(), op: "bce_mean".into() });
        }
        Ok(self.push(Op::BceMean { labels: labels.to_vec() }, vec![logits], Value::Scalar(value)))
    }

    /// Weighted sum of scalar nodes.
    pub fn scalar_weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::EmptyInput("scalar sum over zero terms"));
        }
        let mut value = T::zero();
        for &(id, w) in terms {
            value += self.scalar(id)? * T::from_f64(w);
        }
        let (inputs, weights) = terms.iter().map(|&(id, w)| (id, w)).unzip();
        Ok(self.push(Op::ScalarWeightedSum { weights }, inputs, Value::Scalar(value)))
    }

    /// Reverse pass from a scalar loss. Returns parameter gradients; every
    /// parameter in the store gets a slot, zero if the loss never saw it.
    pub fn backward(&self, loss: NodeId) -> Result<GradStore<T>> {
        match &self.node(loss).value {
            Value::Scalar(v) => {
                if !v.is_finite() {
                    return Err(Error::Numerical { node: loss.0, op: self.node(loss).op.name().into() });
                }
            }
            Value::Map(_) => {
                return Err(Error::Shape("backward needs a scalar loss node".into()));
            }
        }

        let mut grads: Vec<Option<Grad<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Grad::Scalar(T::one()));
        let mut param_grads = GradStore::zeros_like(self.params);

        for id in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.backward_node(id, node, grad, &mut grads, &mut param_grads)?;
        }

        if !param_grads.all_finite() {
            return Err(Error::Numerical { node: loss.0, op: "parameter gradients".into() });
        }
        Ok(param_grads)
    }

    fn accumulate_map_grad(
        grads: &mut [Option<Grad<T>>],
        target: NodeId,
        delta: Array2<T>,
    ) -> Result<()> {
        match &mut grads[target.0] {
            Some(Grad::Map(existing)) => {
                *existing += &delta;
            }
            Some(Grad::Scalar(_)) => {
                return Err(Error::Shape("gradient kind mismatch".into()));
            }
            slot @ None => {
                *slot = Some(Grad::Map(delta));
            }
        }
        Ok(())
    }

    fn accumulate_scalar_grad(
        grads: &mut [Option<Grad<T>>],
        target: NodeId,
        delta: T,
    ) -> Result<()> {
        match &mut grads[target.0] {
            Some(Grad::Scalar(existing)) => {
                *existing += delta;
            }
            Some(Grad::Map(_)) => {
                return Err(Error::Shape("gradient kind mismatch".into()));
            }
            slot @ None => {
                *slot = Some(Grad::Scalar(delta));
            }
        }
        Ok(())
    }

    fn backward_node(
        &self,
        id: usize,
        node: &Node<T>,
        grad: Grad<T>,
        grads: &mut [Option<Grad<T>>],
        param_grads: &mut GradStore<T>,
    ) -> Result<()> {
        let numerical = |op: &Op| Error::Numerical { node: id, op: op.name().into() };
        match (&node.op, grad) {
            (Op::Input, _) => {}

            (Op::Conv { weight, bias, rulebook }, Grad::Map(dy)) => {
                if !dy.iter().all(|v| v.is_finite()) {
                    return Err(numerical(&node.op));
                }
                let x = self.map(node.inputs[0])?;
                let cin = x.channels();
                let w = self.params.matrix(weight)?;
                let mut dw: Array2<T> = Array2::zeros(w.raw_dim());
                let mut dx: Array2<T> = Array2::zeros(x.features().raw_dim());
                for (t, tap) in rulebook.taps.iter().enumerate() {
                    if tap.out_rows.is_empty() {
                        continue;
                    }
                    let w_t = w.slice(s![t * cin..(t + 1) * cin, ..]);
                    let dy_sel = dy.select(Axis(0), &tap.out_rows);
                    let x_sel = x.features().select(Axis(0), &tap.in_rows);
                    let dw_t = x_sel.t().dot(&dy_sel);
                    {
                        let mut dst = dw.slice_mut(s![t * cin..(t + 1) * cin, ..]);
                        dst += &dw_t;
                    }
                    let dx_part = dy_sel.dot(&w_t.t());
                    for (r, &in_row) in tap.in_rows.iter().enumerate() {
                        let mut row = dx.row_mut(in_row);
                        row += &dx_part.row(r);
                    }
                }
                param_grads.add_matrix(weight, &dw)?;
                if let Some(bias) = bias {
                    param_grads.add_vector(bias, &dy.sum_axis(Axis(0)))?;
                }
                Self::accumulate_map_grad(grads, node.inputs[0], dx)?;
            }

            (Op::PoolDown { parent_of_child, child_counts }, Grad::Map(dy)) => {
                let x = self.map(node.inputs[0])?;
                let mut dx: Array2<T> = Array2::zeros(x.features().raw_dim());
                for (child, &parent) in parent_of_child.iter().enumerate() {
                    let inv = T::from_f64(1.0 / child_counts[parent] as f64);
                    let scaled = dy.row(parent).mapv(|v| v * inv);
                    dx.row_mut(child).assign(&scaled);
                }
                Self::accumulate_map_grad(grads, node.inputs[0], dx)?;
            }

            (Op::UnpoolUp { parent_of_fine, coarse_rows }, Grad::Map(dy)) => {
                let channels = dy.ncols();
                let mut dx: Array2<T> = Array2::zeros((*coarse_rows, channels));
                for (fine, &parent) in parent_of_fine.iter().enumerate() {
                    let mut row = dx.row_mut(parent);
                    row += &dy.row(fine);
                }
                Self::accumulate_map_grad(grads, node.inputs[0], dx)?;
            }

            (Op::Linear { weight, bias }, Grad::Map(dy)) => {
                if !dy.iter().all(|v| v.is_finite()) {
                    return Err(numerical(&node.op));
                }
                let x = self.map(node.inputs[0])?;
                let w = self.params.matrix(weight)?;
                param_grads.add_matrix(weight, &x.features().t().dot(&dy))?;
                if let Some(bias) = bias {
                    param_grads.add_vector(bias, &dy.sum_axis(Axis(0)))?;
                }
                Self::accumulate_map_grad(grads, node.inputs[0], dy.dot(&w.t()))?;
            }

            (Op::Relu, Grad::Map(dy)) => {
                let x = self.map(node.inputs[0])?;
                let mut dx = dy;
                dx.zip_mut_with(x.features(), |g, &v| {
                    if v <= T::zero() {
                        *g = T::zero();
                    }
                });
                Self::accumulate_map_grad(grads, node.inputs[0], dx)?;
            }

            (Op::Gelu, Grad::Map(dy)) => {
                let x = self.map(node.inputs[0])?;
                let mut dx = dy;
                dx.zip_mut_with(x.features(), |g, &v| *g *= gelu_derivative(v));
                Self::accumulate_map_grad(grads, node.inputs[0], dx)?;
            }

            (Op::Add, Grad::Map(dy)) => {
                Self::accumulate_map_grad(grads, node.inputs[0], dy.clone())?;
                Self::accumulate_map_grad(grads, node.inputs[1], dy)?;
            }

            (Op::Concat { split }, Grad::Map(dy)) => {
                let da = dy.slice(s![.., ..*split]).to_owned();
                let db = dy.slice(s![.., *split..]).to_owned();
                Self::accumulate_map_grad(grads, node.inputs[0], da)?;
                Self::accumulate_map_grad(grads, node.inputs[1], db)?;
            }

            (Op::Restrict { rows, input_rows }, Grad::Map(dy)) => {
                let mut dx: Array2<T> = Array2::zeros((*input_rows, dy.ncols()));
                for (out_row, &in_row) in rows.iter().enumerate() {
                    let mut row = dx.row_mut(in_row);
                    row += &dy.row(out_row);
                }
                Self::accumulate_map_grad(grads, node.inputs[0], dx)?;
            }

            (Op::PadZeros { src_rows, input_rows }, Grad::Map(dy)) => {
                let mut dx: Array2<T> = Array2::zeros((*input_rows, dy.ncols()));
                for (out_row, src) in src_rows.iter().enumerate() {
                    if let Some(in_row) = src {
                        let mut row = dx.row_mut(*in_row);
                        row += &dy.row(out_row);
                    }
                }
                Self::accumulate_map_grad(grads, node.inputs[0], dx)?;
            }

            (Op::BceMean { labels }, Grad::Scalar(up)) => {
                let x = self.map(node.inputs[0])?;
                let inv_n = T::from_f64(1.0 / labels.len() as f64);
                let mut dz: Array2<T> = Array2::zeros((labels.len(), 1));
                for (row, &label) in labels.iter().enumerate() {
                    let z = x.features()[(row, 0)];
                    let y = if label { T::one() } else { T::zero() };
                    dz[(row, 0)] = (sigmoid(z) - y) * inv_n * up;
                }
                if !dz.iter().all(|v| v.is_finite()) {
                    return Err(numerical(&node.op));
                }
                Self::accumulate_map_grad(grads, node.inputs[0], dz)?;
            }

            (Op::ScalarWeightedSum { weights }, Grad::Scalar(up)) => {
                for (input, &w) in node.inputs.iter().zip(weights) {
                    Self::accumulate_scalar_grad(grads, *input, up * T::from_f64(w))?;
                }
            }

            _ => return Err(Error::Shape(format!("gradient kind mismatch at {}", node.op.name()))),
        }
        Ok(())
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Stable per-element BCE with logits: `max(z,0) - z*y + ln(1 + exp(-|z|))`.
pub fn bce_element<T: Scalar>(z: T, label: bool) -> T {
    let y = if label { T::one() } else { T::zero() };
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu_forward<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsenn::params::Param;
    use ndarray::array;

    fn line_map(n: i32, channels: usize) -> SparseFeatureMap<f64> {
        let coords: Vec<VoxelCoord> = (0..n).map(|i| VoxelCoord::new(i, 0, 0, 0)).collect();
        let feats = Array2::from_shape_fn((n as usize, channels), |(r, c)| {
            (r as f64 + 1.0) * 0.3 + c as f64 * 0.11
        });
        SparseFeatureMap::new(0, coords, feats).unwrap()
    }

    fn identity_conv_weight(reach: i32, channels: usize) -> Array2<f64> {
        let taps = (2 * reach + 1).pow(3) as usize;
        let center = (taps - 1) / 2;
        let mut w = Array2::zeros((taps * channels, channels));
        for c in 0..channels {
            w[(center * channels + c, c)] = 1.0;
        }
        w
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut params = ParamStore::new();
        params.insert("w", Param::Matrix(identity_conv_weight(1, 3)));
        let mut g = Graph::new(&params);
        let map = line_map(10, 3);
        let expected = map.features().clone();
        let x = g.input(map);
        let y = g.submanifold_conv(x, "w", None, 1).unwrap();
        assert_eq!(g.map(y).unwrap().features(), &expected);
    }

    #[test]
    fn single_voxel_uses_only_center_tap() {
        let mut params = ParamStore::new();
        let mut w = identity_conv_weight(1, 2);
        // Scatter junk on off-center taps; they have no neighbor to read.
        w[(0, 0)] = 99.0;
        w[(53, 1)] = -7.0;
        params.insert("w", Param::Matrix(w));
        let mut g = Graph::new(&params);
        let map = SparseFeatureMap::new(
            0,
            vec![VoxelCoord::new(4, -2, 7, 0)],
            array![[1.5, -0.5]],
        )
        .unwrap();
        let x = g.input(map);
        let y = g.submanifold_conv(x, "w", None, 1).unwrap();
        assert_eq!(g.map(y).unwrap().features(), &array![[1.5, -0.5]]);
    }

    #[test]
    fn expansion_of_single_voxel_covers_27_cells() {
        let mut params = ParamStore::new();
        let w = Array2::from_elem((27, 1), 1.0f64);
        params.insert("w", Param::Matrix(w));
        let mut g = Graph::new(&params);
        let map =
            SparseFeatureMap::new(0, vec![VoxelCoord::new(0, 0, 0, 0)], array![[2.0]]).unwrap();
        let x = g.input(map);
        let y = g.expansion_conv(x, "w", None, 1).unwrap();
        let out = g.map(y).unwrap();
        assert_eq!(out.num_coords(), 27);
        for r in 0..27 {
            assert_eq!(out.features()[(r, 0)], 2.0);
        }
    }

    #[test]
    fn pool_then_unpool_roundtrip() {
        let params: ParamStore<f64> = ParamStore::new();
        let mut g = Graph::new(&params);
        // Two parents, one with two children carrying equal features.
        let coords = vec![
            VoxelCoord::new(0, 0, 0, 0),
            VoxelCoord::new(1, 0, 0, 0),
            VoxelCoord::new(4, 0, 0, 0),
        ];
        let feats = array![[2.0, 1.0], [2.0, 1.0], [5.0, -1.0]];
        let map = SparseFeatureMap::new(0, coords.clone(), feats).unwrap();
        let x = g.input(map);
        let pooled = g.pool_down(x).unwrap();
        let out = g.map(pooled).unwrap();
        assert_eq!(out.num_coords(), 2);
        assert_eq!(out.features(), &array![[2.0, 1.0], [5.0, -1.0]]);

        let unpooled = g.unpool_up(pooled, &coords).unwrap();
        assert_eq!(g.map(unpooled).unwrap().features(), &array![[2.0, 1.0], [2.0, 1.0], [5.0, -1.0]]);
    }

    #[test]
    fn unpool_missing_parent_errors() {
        let params = ParamStore::new();
        let mut g: Graph<f64> = Graph::new(&params);
        let coarse =
            SparseFeatureMap::new(1, vec![VoxelCoord::new(0, 0, 0, 1)], array![[1.0]]).unwrap();
        let x = g.input(coarse);
        let err = g.unpool_up(x, &[VoxelCoord::new(5, 5, 5, 0)]).unwrap_err();
        assert!(matches!(err, Error::MissingParent { .. }));
    }

    #[test]
    fn bce_matches_reference_values() {
        let params = ParamStore::new();
        let mut g: Graph<f64> = Graph::new(&params);
        let map = SparseFeatureMap::new(
            0,
            vec![VoxelCoord::new(0, 0, 0, 0), VoxelCoord::new(1, 0, 0, 0)],
            array![[0.0], [20.0]],
        )
        .unwrap();
        let x = g.input(map);
        let loss = g.bce_mean(x, &[true, true]).unwrap();
        let expected = (std::f64::consts::LN_2 + (-20.0f64).exp().ln_1p()) / 2.0;
        assert!((g.scalar(loss).unwrap() - expected).abs() < 1e-15);
        // +20 logit with label 1 costs about 2.06e-9, no overflow.
        assert!(bce_element(20.0f64, true) < 3e-9);
        assert!(bce_element(20.0f64, true) > 1e-9);
    }

    #[test]
    fn linear_bce_gradient_matches_closed_form() {
        // d/dw BCE(sigmoid(x . w), y) = (sigmoid(z) - y) * x
        let mut params = ParamStore::new();
        params.insert("w", Param::Matrix(array![[0.4], [-0.3]]));
        let mut g = Graph::new(&params);
        let map = SparseFeatureMap::new(
            0,
            vec![VoxelCoord::new(0, 0, 0, 0)],
            array![[1.2, -0.7]],
        )
        .unwrap();
        let x = g.input(map);
        let z = g.linear(x, "w", None).unwrap();
        let loss = g.bce_mean(z, &[true]).unwrap();
        let grads = g.backward(loss).unwrap();
        let zv = 1.2 * 0.4 + 0.7 * 0.3;
        let sig = 1.0 / (1.0 + (-zv as f64).exp());
        let expected = array![[(sig - 1.0) * 1.2], [(sig - 1.0) * -0.7]];
        let got = grads.get("w").unwrap().as_matrix().unwrap();
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn untouched_parameter_gets_zero_gradient() {
        let mut params = ParamStore::new();
        params.insert("w", Param::Matrix(array![[1.0]]));
        params.insert("orphan", Param::Matrix(array![[3.0, 1.0], [2.0, 5.0]]));
        let mut g = Graph::new(&params);
        let map = SparseFeatureMap::new(0, vec![VoxelCoord::new(0, 0, 0, 0)], array![[0.5]]).unwrap();
        let x = g.input(map);
        let z = g.linear(x, "w", None).unwrap();
        let loss = g.bce_mean(z, &[false]).unwrap();
        let grads = g.backward(loss).unwrap();
        let orphan = grads.get("orphan").unwrap().as_matrix().unwrap();
        assert!(orphan.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_and_gelu_basics() {
        let params = ParamStore::new();
        let mut g: Graph<f64> = Graph::new(&params);
        let map = SparseFeatureMap::new(
            0,
            vec![VoxelCoord::new(0, 0, 0, 0), VoxelCoord::new(1, 0, 0, 0)],
            array![[-2.0], [3.0]],
        )
        .unwrap();
        let x = g.input(map);
        let r = g.relu(x).unwrap();
        assert_eq!(g.map(r).unwrap().features(), &array![[0.0], [3.0]]);
        let ge = g.gelu(x).unwrap();
        let out = g.map(ge).unwrap().features().clone();
        assert!(out[(0, 0)] < 0.0 && out[(0, 0)].abs() < 0.1);
        assert!((out[(1, 0)] - 3.0).abs() < 0.01);
    }

    #[test]
    fn restrict_missing_coord_is_coverage_error() {
        let params = ParamStore::new();
        let mut g: Graph<f64> = Graph::new(&params);
        let map = SparseFeatureMap::new(0, vec![VoxelCoord::new(0, 0, 0, 0)], array![[1.0]]).unwrap();
        let x = g.input(map);
        let err = g.restrict(x, &[VoxelCoord::new(9, 9, 9, 0)]).unwrap_err();
        assert!(matches!(err, Error::Coverage { .. }));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut params = ParamStore::new();
        params.insert("w", Param::Matrix(Array2::zeros((27 * 2, 4))));
        let mut g: Graph<f64> = Graph::new(&params);
        let x = g.input(line_map(6, 2));
        let y = g.submanifold_conv(x, "w", None, 1).unwrap();
        assert!(g.map(y).unwrap().features().iter().all(|&v| v == 0.0));
    }
}

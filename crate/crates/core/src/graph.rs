//! Reverse-mode autodiff over a flat tape of eager tensor ops.
//!
//! Nodes are appended in evaluation order, so reverse index order is a
//! valid topological order for the backward sweep. Values stay on the
//! tape, which lets every backward rule read its parents' forward
//! values instead of keeping per-op caches. The op set is exactly what
//! the pipeline needs; there is no broadcasting beyond the two gate
//! shapes used by the attention blocks.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{shape_mismatch, CdreError, Result};
use crate::nn::ParamId;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    InstanceNorm2d { x: NodeId, eps: f64 },
    LayerNormRows { x: NodeId, eps: f64 },
    LeakyRelu { x: NodeId, slope: f64 },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    SigmoidRoundSte { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Affine { x: NodeId, mul: f64 },
    MulChannelGate { x: NodeId, gate: NodeId },
    MulSpatialGate { x: NodeId, gate: NodeId },
    ConcatChannels { a: NodeId, b: NodeId },
    UpsampleNearest2 { x: NodeId },
    CropHw { x: NodeId, h: usize, w: usize },
    GlobalAvgPool { x: NodeId },
    MeanRows { x: NodeId },
    ChannelMeanMax { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    MatMul { a: NodeId, b: NodeId },
    MatMulNT { a: NodeId, b: NodeId },
    SoftmaxRows { x: NodeId },
    ColSlice { x: NodeId, start: usize, len: usize },
    ConcatCols { a: NodeId, b: NodeId },
    GridToTokens { x: NodeId },
    TokensToGrid { x: NodeId, h: usize, w: usize },
    SpatialCosineMean { a: NodeId, b: NodeId, eps: f64 },
    CrossEntropyLogits { x: NodeId, label: usize },
    SumAll { x: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.by_node.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Parameter leaves bound on this tape, for gradient collection.
    params: Vec<(NodeId, ParamId)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn param_bindings(&self) -> &[(NodeId, ParamId)] {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Non-differentiable leaf (inputs, constants).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a parameter (used by tests and
    /// gradient checks).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Differentiable leaf bound to a named parameter.
    pub fn param_leaf(&mut self, value: Tensor, pid: ParamId, trainable: bool) -> NodeId {
        let id = self.push(value, Op::Leaf, trainable);
        self.params.push((id, pid));
        id
    }

    // ---- spatial ops ------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.rank() != 3 || wv.rank() != 4 || xv.dim(0) != wv.dim(1) {
            return Err(shape_mismatch(wv.shape(), xv.shape()));
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [wv.dim(0)] {
                return Err(shape_mismatch(&[wv.dim(0)], bv.shape()));
            }
        }
        let value = conv2d_forward(xv, wv, b.map(|b| self.value(b)), stride, pad)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, needs))
    }

    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(CdreError::InvalidArgument(
                "instance norm expects [C, H, W]".into(),
            ));
        }
        let (c, hw) = (xv.dim(0), xv.dim(1) * xv.dim(2));
        let mut out = Tensor::zeros(xv.shape());
        for ci in 0..c {
            let src = &xv.data()[ci * hw..(ci + 1) * hw];
            let (mean, var) = mean_var(src);
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out.data_mut()[ci * hw..(ci + 1) * hw]
                .iter_mut()
                .zip(src.iter())
            {
                *o = (v - mean) * inv;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::InstanceNorm2d { x, eps }, needs))
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(CdreError::InvalidArgument(
                "layer norm expects [N, C]".into(),
            ));
        }
        let (n, c) = (xv.dim(0), xv.dim(1));
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..n {
            let src = &xv.data()[r * c..(r + 1) * c];
            let (mean, var) = mean_var(src);
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src.iter()) {
                *o = (v - mean) * inv;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::LayerNormRows { x, eps }, needs))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let needs = self.needs(x);
        self.push(out, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid { x }, needs)
    }

    /// Binary quantizer: forward rounds `sigmoid(x)` (ties at 0.5 go to 1),
    /// backward passes the sigmoid derivative straight through.
    pub fn sigmoid_round_ste(&mut self, x: NodeId) -> NodeId {
        let out = self
            .value(x)
            .map(|v| if sigmoid(v) >= 0.5 { 1.0 } else { 0.0 });
        let needs = self.needs(x);
        self.push(out, Op::SigmoidRoundSte { x }, needs)
    }

    // ---- elementwise ------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.value(a).same_shape(self.value(b))?;
        let mut out = self.value(a).clone();
        out.axpy(1.0, self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.value(a).same_shape(self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let out = self.value(x).map(|v| mul * v + add);
        let needs = self.needs(x);
        self.push(out, Op::Affine { x, mul }, needs)
    }

    /// `x[c,h,w] * gate[0,c]` — per-channel gating.
    pub fn mul_channel_gate(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let gv = self.value(gate);
        if xv.rank() != 3 || gv.shape() != [1, xv.dim(0)] {
            return Err(shape_mismatch(&[1, xv.dim(0)], gv.shape()));
        }
        let hw = xv.dim(1) * xv.dim(2);
        let mut out = xv.clone();
        for c in 0..xv.dim(0) {
            let g = gv.data()[c];
            for v in &mut out.data_mut()[c * hw..(c + 1) * hw] {
                *v *= g;
            }
        }
        let needs = self.needs(x) || self.needs(gate);
        Ok(self.push(out, Op::MulChannelGate { x, gate }, needs))
    }

    /// `x[c,h,w] * gate[0,h,w]` — shared spatial gating.
    pub fn mul_spatial_gate(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let gv = self.value(gate);
        if xv.rank() != 3 || gv.shape() != [1, xv.dim(1), xv.dim(2)] {
            return Err(shape_mismatch(&[1, xv.dim(1), xv.dim(2)], gv.shape()));
        }
        let hw = xv.dim(1) * xv.dim(2);
        let mut out = xv.clone();
        for c in 0..xv.dim(0) {
            for (v, &g) in out.data_mut()[c * hw..(c + 1) * hw]
                .iter_mut()
                .zip(gv.data())
            {
                *v *= g;
            }
        }
        let needs = self.needs(x) || self.needs(gate);
        Ok(self.push(out, Op::MulSpatialGate { x, gate }, needs))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.rank() != 3 || bv.rank() != 3 || av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2) {
            return Err(shape_mismatch(av.shape(), bv.shape()));
        }
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let out = Tensor::new(&[av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatChannels { a, b }, needs))
    }

    pub fn upsample_nearest_2x(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(CdreError::InvalidArgument(
                "upsample expects [C, H, W]".into(),
            ));
        }
        let (c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
        for ci in 0..c {
            for y in 0..2 * h {
                for x2 in 0..2 * w {
                    out.data_mut()[ci * 4 * h * w + y * 2 * w + x2] =
                        xv.data()[ci * h * w + (y / 2) * w + x2 / 2];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::UpsampleNearest2 { x }, needs))
    }

    /// Keeps the top-left `h × w` window of a `[C, H, W]` tensor.
    pub fn crop_hw(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 || xv.dim(1) < h || xv.dim(2) < w {
            return Err(CdreError::InvalidArgument(alloc::format!(
                "cannot crop {:?} to {h}x{w}",
                xv.shape()
            )));
        }
        let (c, sh, sw) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let mut out = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            for y in 0..h {
                let src = &xv.data()[ci * sh * sw + y * sw..ci * sh * sw + y * sw + w];
                out.data_mut()[ci * h * w + y * w..ci * h * w + (y + 1) * w]
                    .copy_from_slice(src);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::CropHw { x, h, w }, needs))
    }

    /// `[C, H, W] -> [1, C]` mean over spatial positions.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(CdreError::InvalidArgument("pool expects [C, H, W]".into()));
        }
        let (c, hw) = (xv.dim(0), xv.dim(1) * xv.dim(2));
        let data = (0..c)
            .map(|ci| xv.data()[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(&[1, c], data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::GlobalAvgPool { x }, needs))
    }

    /// `[N, C] -> [1, C]` mean over rows.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.dim(0) == 0 {
            return Err(CdreError::InvalidArgument("mean expects [N, C]".into()));
        }
        let (n, c) = (xv.dim(0), xv.dim(1));
        let mut data = vec![0.0; c];
        for r in 0..n {
            for (acc, &v) in data.iter_mut().zip(&xv.data()[r * c..(r + 1) * c]) {
                *acc += v;
            }
        }
        for v in &mut data {
            *v /= n as f64;
        }
        let out = Tensor::new(&[1, c], data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::MeanRows { x }, needs))
    }

    /// `[C, H, W] -> [2, H, W]`: channel mean map and channel max map.
    pub fn channel_mean_max(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 || xv.dim(0) == 0 {
            return Err(CdreError::InvalidArgument("expects [C, H, W]".into()));
        }
        let (c, hw) = (xv.dim(0), xv.dim(1) * xv.dim(2));
        let mut out = Tensor::zeros(&[2, xv.dim(1), xv.dim(2)]);
        for p in 0..hw {
            let mut sum = 0.0;
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                let v = xv.data()[ci * hw + p];
                sum += v;
                if v > max {
                    max = v;
                }
            }
            out.data_mut()[p] = sum / c as f64;
            out.data_mut()[hw + p] = max;
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::ChannelMeanMax { x }, needs))
    }

    // ---- token ops ---------------------------------------------------

    /// `x [N, I] · w [O, I]^T (+ b [O]) -> [N, O]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1) {
            return Err(shape_mismatch(wv.shape(), xv.shape()));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [wv.dim(0)] {
                return Err(shape_mismatch(&[wv.dim(0)], self.value(b).shape()));
            }
        }
        let (n, i, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
        let mut out = Tensor::zeros(&[n, o]);
        for r in 0..n {
            let xr = &xv.data()[r * i..(r + 1) * i];
            for oc in 0..o {
                let wr = &wv.data()[oc * i..(oc + 1) * i];
                let mut acc = match b {
                    Some(b) => self.value(b).data()[oc],
                    None => 0.0,
                };
                for (xi, wi) in xr.iter().zip(wr) {
                    acc += xi * wi;
                }
                out.data_mut()[r * o + oc] = acc;
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    /// `[N, K] × [K, M] -> [N, M]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0) {
            return Err(shape_mismatch(av.shape(), bv.shape()));
        }
        let (n, k, m) = (av.dim(0), av.dim(1), bv.dim(1));
        let mut out = Tensor::zeros(&[n, m]);
        for r in 0..n {
            for kk in 0..k {
                let x = av.data()[r * k + kk];
                let brow = &bv.data()[kk * m..(kk + 1) * m];
                for (o, &bvv) in out.data_mut()[r * m..(r + 1) * m].iter_mut().zip(brow) {
                    *o += x * bvv;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul { a, b }, needs))
    }

    /// `[N, K] × [M, K]^T -> [N, M]` (second operand transposed).
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1) {
            return Err(shape_mismatch(av.shape(), bv.shape()));
        }
        let (n, k, m) = (av.dim(0), av.dim(1), bv.dim(0));
        let mut out = Tensor::zeros(&[n, m]);
        for r in 0..n {
            let ar = &av.data()[r * k..(r + 1) * k];
            for mr in 0..m {
                let br = &bv.data()[mr * k..(mr + 1) * k];
                out.data_mut()[r * m + mr] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulNT { a, b }, needs))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(CdreError::InvalidArgument("softmax expects [N, M]".into()));
        }
        let (n, m) = (xv.dim(0), xv.dim(1));
        let mut out = Tensor::zeros(&[n, m]);
        for r in 0..n {
            let row = &xv.data()[r * m..(r + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out.data_mut()[r * m..(r + 1) * m].iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in &mut out.data_mut()[r * m..(r + 1) * m] {
                *o /= sum;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::SoftmaxRows { x }, needs))
    }

    /// Column slice `[N, C] -> [N, len]` starting at `start`.
    pub fn col_slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 || start + len > xv.dim(1) {
            return Err(CdreError::InvalidArgument(alloc::format!(
                "column slice {start}..{} out of bounds for {:?}",
                start + len,
                xv.shape()
            )));
        }
        let (n, c) = (xv.dim(0), xv.dim(1));
        let mut out = Tensor::zeros(&[n, len]);
        for r in 0..n {
            out.data_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&xv.data()[r * c + start..r * c + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::ColSlice { x, start, len }, needs))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.rank() != 2 || bv.rank() != 2 || av.dim(0) != bv.dim(0) {
            return Err(shape_mismatch(av.shape(), bv.shape()));
        }
        let (n, ca, cb) = (av.dim(0), av.dim(1), bv.dim(1));
        let mut out = Tensor::zeros(&[n, ca + cb]);
        for r in 0..n {
            out.data_mut()[r * (ca + cb)..r * (ca + cb) + ca]
                .copy_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            out.data_mut()[r * (ca + cb) + ca..(r + 1) * (ca + cb)]
                .copy_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatCols { a, b }, needs))
    }

    /// `[C, H, W] -> [H·W, C]` row-major position tokens.
    pub fn grid_to_tokens(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(CdreError::InvalidArgument("expects [C, H, W]".into()));
        }
        let (c, hw) = (xv.dim(0), xv.dim(1) * xv.dim(2));
        let mut out = Tensor::zeros(&[hw, c]);
        for ci in 0..c {
            for p in 0..hw {
                out.data_mut()[p * c + ci] = xv.data()[ci * hw + p];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::GridToTokens { x }, needs))
    }

    /// `[H·W, C] -> [C, h, w]`.
    pub fn tokens_to_grid(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.dim(0) != h * w {
            return Err(CdreError::InvalidArgument(alloc::format!(
                "cannot arrange {:?} as {h}x{w} grid",
                xv.shape()
            )));
        }
        let c = xv.dim(1);
        let mut out = Tensor::zeros(&[c, h, w]);
        for p in 0..h * w {
            for ci in 0..c {
                out.data_mut()[ci * h * w + p] = xv.data()[p * c + ci];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::TokensToGrid { x, h, w }, needs))
    }

    // ---- reductions and losses ----------------------------------------

    /// Mean over spatial positions of the channel-wise cosine similarity
    /// between two `[C, H, W]` tensors. Scalar output in `[-1, 1]`.
    pub fn spatial_cosine_mean(&mut self, a: NodeId, b: NodeId, eps: f64) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        av.same_shape(bv)?;
        if av.rank() != 3 {
            return Err(CdreError::InvalidArgument("expects [C, H, W]".into()));
        }
        let value = spatial_cosine_mean_value(av, bv, eps);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::scalar(value),
            Op::SpatialCosineMean { a, b, eps },
            needs,
        ))
    }

    /// Softmax cross-entropy of `[1, K]` logits against a class id.
    pub fn cross_entropy_logits(&mut self, x: NodeId, label: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.dim(0) != 1 {
            return Err(CdreError::InvalidArgument(
                "cross entropy expects [1, K] logits".into(),
            ));
        }
        if label >= xv.dim(1) {
            return Err(CdreError::InvalidArgument(alloc::format!(
                "label {label} out of range for {} classes",
                xv.dim(1)
            )));
        }
        let value = cross_entropy_value(xv.data(), label);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropyLogits { x, label },
            needs,
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(value), Op::SumAll { x }, needs)
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from `root` (typically a scalar). Returns per-node
    /// gradients for every differentiable node that influences `root`.
    pub fn backward(&self, root: NodeId) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { by_node: grads }
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[id];
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                conv2d_backward(
                    self.value(x),
                    self.value(w),
                    g,
                    stride,
                    pad,
                    if self.needs(x) {
                        Some(self.slot(grads, x))
                    } else {
                        None
                    },
                );
                // Split borrows: recompute per-target to keep the borrow local.
                if self.needs(w) {
                    conv2d_backward_w(self.value(x), g, stride, pad, self.slot(grads, w));
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let (hw, co) = (g.dim(1) * g.dim(2), g.dim(0));
                        let db = self.slot(grads, b);
                        for oc in 0..co {
                            db.data_mut()[oc] +=
                                g.data()[oc * hw..(oc + 1) * hw].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::InstanceNorm2d { x, eps } => {
                if !self.needs(x) {
                    return;
                }
                let xv = self.value(x);
                let yv = &node.value;
                let (c, hw) = (xv.dim(0), xv.dim(1) * xv.dim(2));
                let dx = self.slot(grads, x);
                for ci in 0..c {
                    let src = &xv.data()[ci * hw..(ci + 1) * hw];
                    let y = &yv.data()[ci * hw..(ci + 1) * hw];
                    let go = &g.data()[ci * hw..(ci + 1) * hw];
                    let (_, var) = mean_var(src);
                    let inv = 1.0 / (var + eps).sqrt();
                    let mean_g: f64 = go.iter().sum::<f64>() / hw as f64;
                    let mean_gy: f64 =
                        go.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                    for ((d, &gi), &yi) in dx.data_mut()[ci * hw..(ci + 1) * hw]
                        .iter_mut()
                        .zip(go)
                        .zip(y)
                    {
                        *d += (gi - mean_g - yi * mean_gy) * inv;
                    }
                }
            }
            Op::LayerNormRows { x, eps } => {
                if !self.needs(x) {
                    return;
                }
                let xv = self.value(x);
                let yv = &node.value;
                let (n, c) = (xv.dim(0), xv.dim(1));
                let dx = self.slot(grads, x);
                for r in 0..n {
                    let src = &xv.data()[r * c..(r + 1) * c];
                    let y = &yv.data()[r * c..(r + 1) * c];
                    let go = &g.data()[r * c..(r + 1) * c];
                    let (_, var) = mean_var(src);
                    let inv = 1.0 / (var + eps).sqrt();
                    let mean_g: f64 = go.iter().sum::<f64>() / c as f64;
                    let mean_gy: f64 = go.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((d, &gi), &yi) in dx.data_mut()[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(go)
                        .zip(y)
                    {
                        *d += (gi - mean_g - yi * mean_gy) * inv;
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if !self.needs(x) {
                    return;
                }
                let xv = self.value(x);
                let dx = self.slot(grads, x);
                for ((d, &gi), &xi) in dx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    *d += gi * if xi > 0.0 { 1.0 } else { slope };
                }
            }
            Op::Relu { x } => {
                if !self.needs(x) {
                    return;
                }
                let xv = self.value(x);
                let dx = self.slot(grads, x);
                for ((d, &gi), &xi) in dx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    *d += if xi > 0.0 { gi } else { 0.0 };
                }
            }
            Op::Sigmoid { x } => {
                if !self.needs(x) {
                    return;
                }
                let yv = &node.value;
                let dx = self.slot(grads, x);
                for ((d, &gi), &yi) in dx.data_mut().iter_mut().zip(g.data()).zip(yv.data()) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
            Op::SigmoidRoundSte { x } => {
                if !self.needs(x) {
                    return;
                }
                let xv = self.value(x);
                let dx = self.slot(grads, x);
                for ((d, &gi), &xi) in dx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    let s = sigmoid(xi);
                    *d += gi * s * (1.0 - s);
                }
            }
            Op::Add { a, b } => {
                if self.needs(a) {
                    self.slot(grads, a).axpy(1.0, g);
                }
                if self.needs(b) {
                    self.slot(grads, b).axpy(1.0, g);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let bv = self.value(b).clone();
                    let da = self.slot(grads, a);
                    for ((d, &gi), &bi) in da.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += gi * bi;
                    }
                }
                if self.needs(b) {
                    let av = self.value(a).clone();
                    let db = self.slot(grads, b);
                    for ((d, &gi), &ai) in db.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Affine { x, mul } => {
                if self.needs(x) {
                    self.slot(grads, x).axpy(mul, g);
                }
            }
            Op::MulChannelGate { x, gate } => {
                let (c, hw) = (g.dim(0), g.dim(1) * g.dim(2));
                if self.needs(x) {
                    let gv = self.value(gate).clone();
                    let dx = self.slot(grads, x);
                    for ci in 0..c {
                        let gc = gv.data()[ci];
                        for (d, &gi) in dx.data_mut()[ci * hw..(ci + 1) * hw]
                            .iter_mut()
                            .zip(&g.data()[ci * hw..(ci + 1) * hw])
                        {
                            *d += gi * gc;
                        }
                    }
                }
                if self.needs(gate) {
                    let xv = self.value(x).clone();
                    let dg = self.slot(grads, gate);
                    for ci in 0..c {
                        dg.data_mut()[ci] += g.data()[ci * hw..(ci + 1) * hw]
                            .iter()
                            .zip(&xv.data()[ci * hw..(ci + 1) * hw])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
            Op::MulSpatialGate { x, gate } => {
                let (c, hw) = (g.dim(0), g.dim(1) * g.dim(2));
                if self.needs(x) {
                    let gv = self.value(gate).clone();
                    let dx = self.slot(grads, x);
                    for ci in 0..c {
                        for ((d, &gi), &gs) in dx.data_mut()[ci * hw..(ci + 1) * hw]
                            .iter_mut()
                            .zip(&g.data()[ci * hw..(ci + 1) * hw])
                            .zip(gv.data())
                        {
                            *d += gi * gs;
                        }
                    }
                }
                if self.needs(gate) {
                    let xv = self.value(x).clone();
                    let dg = self.slot(grads, gate);
                    for ci in 0..c {
                        for ((d, &gi), &xi) in dg
                            .data_mut()
                            .iter_mut()
                            .zip(&g.data()[ci * hw..(ci + 1) * hw])
                            .zip(&xv.data()[ci * hw..(ci + 1) * hw])
                        {
                            *d += gi * xi;
                        }
                    }
                }
            }
            Op::ConcatChannels { a, b } => {
                let ca = self.value(a).dim(0);
                let hw = g.dim(1) * g.dim(2);
                if self.needs(a) {
                    self.slot(grads, a)
                        .data_mut()
                        .iter_mut()
                        .zip(&g.data()[..ca * hw])
                        .for_each(|(d, &gi)| *d += gi);
                }
                if self.needs(b) {
                    self.slot(grads, b)
                        .data_mut()
                        .iter_mut()
                        .zip(&g.data()[ca * hw..])
                        .for_each(|(d, &gi)| *d += gi);
                }
            }
            Op::UpsampleNearest2 { x } => {
                if !self.needs(x) {
                    return;
                }
                let (c, h2, w2) = (g.dim(0), g.dim(1), g.dim(2));
                let (h, w) = (h2 / 2, w2 / 2);
                let dx = self.slot(grads, x);
                for ci in 0..c {
                    for y in 0..h2 {
                        for x2 in 0..w2 {
                            dx.data_mut()[ci * h * w + (y / 2) * w + x2 / 2] +=
                                g.data()[ci * h2 * w2 + y * w2 + x2];
                        }
                    }
                }
            }
            Op::CropHw { x, h, w } => {
                if !self.needs(x) {
                    return;
                }
                let xv_shape = (self.value(x).dim(0), self.value(x).dim(1), self.value(x).dim(2));
                let (c, sh, sw) = xv_shape;
                let dx = self.slot(grads, x);
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx.data_mut()[ci * sh * sw + y * sw + xx] +=
                                g.data()[ci * h * w + y * w + xx];
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                if !self.needs(x) {
                    return;
                }
                let xv = self.value(x);
                let (c, hw) = (xv.dim(0), xv.dim(1) * xv.dim(2));
                let dx = self.slot(grads, x);
                for ci in 0..c {
                    let gi = g.data()[ci] / hw as f64;
                    for d in &mut dx.data_mut()[ci * hw..(ci + 1) * hw] {
                        *d += gi;
                    }
                }
            }
            Op::MeanRows { x } => {
                if !self.needs(x) {
                    return;
                }
                let (n, c) = (self.value(x).dim(0), self.value(x).dim(1));
                let dx = self.slot(grads, x);
                for r in 0..n {
                    for (d, &gi) in dx.data_mut()[r * c..(r + 1) * c].iter_mut().zip(g.data()) {
                        *d += gi / n as f64;
                    }
                }
            }
            Op::ChannelMeanMax { x } => {
                if !self.needs(x) {
                    return;
                }
                let xv = self.value(x).clone();
                let (c, hw) = (xv.dim(0), xv.dim(1) * xv.dim(2));
                let dx = self.slot(grads, x);
                for p in 0..hw {
                    let gmean = g.data()[p] / c as f64;
                    // first-index argmax, matching the forward pass
                    let mut arg = 0;
                    let mut best = f64::NEG_INFINITY;
                    for ci in 0..c {
                        let v = xv.data()[ci * hw + p];
                        if v > best {
                            best = v;
                            arg = ci;
                        }
                    }
                    for ci in 0..c {
                        dx.data_mut()[ci * hw + p] += gmean;
                    }
                    dx.data_mut()[arg * hw + p] += g.data()[hw + p];
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (n, i, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
                if self.needs(x) {
                    let wv = wv.clone();
                    let dx = self.slot(grads, x);
                    for r in 0..n {
                        for oc in 0..o {
                            let gi = g.data()[r * o + oc];
                            let wr = &wv.data()[oc * i..(oc + 1) * i];
                            for (d, &wi) in dx.data_mut()[r * i..(r + 1) * i].iter_mut().zip(wr)
                            {
                                *d += gi * wi;
                            }
                        }
                    }
                }
                if self.needs(w) {
                    let xv = xv.clone();
                    let dw = self.slot(grads, w);
                    for r in 0..n {
                        let xr = &xv.data()[r * i..(r + 1) * i];
                        for oc in 0..o {
                            let gi = g.data()[r * o + oc];
                            for (d, &xi) in dw.data_mut()[oc * i..(oc + 1) * i]
                                .iter_mut()
                                .zip(xr)
                            {
                                *d += gi * xi;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let db = self.slot(grads, b);
                        for r in 0..n {
                            for (d, &gi) in
                                db.data_mut().iter_mut().zip(&g.data()[r * o..(r + 1) * o])
                            {
                                *d += gi;
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (n, k) = (self.value(a).dim(0), self.value(a).dim(1));
                let m = self.value(b).dim(1);
                if self.needs(a) {
                    let bv = self.value(b).clone();
                    let da = self.slot(grads, a);
                    for r in 0..n {
                        for kk in 0..k {
                            let br = &bv.data()[kk * m..(kk + 1) * m];
                            da.data_mut()[r * k + kk] += g.data()[r * m..(r + 1) * m]
                                .iter()
                                .zip(br)
                                .map(|(x, y)| x * y)
                                .sum::<f64>();
                        }
                    }
                }
                if self.needs(b) {
                    let av = self.value(a).clone();
                    let db = self.slot(grads, b);
                    for r in 0..n {
                        for kk in 0..k {
                            let x = av.data()[r * k + kk];
                            for (d, &gi) in db.data_mut()[kk * m..(kk + 1) * m]
                                .iter_mut()
                                .zip(&g.data()[r * m..(r + 1) * m])
                            {
                                *d += x * gi;
                            }
                        }
                    }
                }
            }
            Op::MatMulNT { a, b } => {
                let (n, k) = (self.value(a).dim(0), self.value(a).dim(1));
                let m = self.value(b).dim(0);
                if self.needs(a) {
                    let bv = self.value(b).clone();
                    let da = self.slot(grads, a);
                    for r in 0..n {
                        for mr in 0..m {
                            let gi = g.data()[r * m + mr];
                            let br = &bv.data()[mr * k..(mr + 1) * k];
                            for (d, &bi) in da.data_mut()[r * k..(r + 1) * k].iter_mut().zip(br) {
                                *d += gi * bi;
                            }
                        }
                    }
                }
                if self.needs(b) {
                    let av = self.value(a).clone();
                    let db = self.slot(grads, b);
                    for r in 0..n {
                        let ar = &av.data()[r * k..(r + 1) * k];
                        for mr in 0..m {
                            let gi = g.data()[r * m + mr];
                            for (d, &ai) in db.data_mut()[mr * k..(mr + 1) * k]
                                .iter_mut()
                                .zip(ar)
                            {
                                *d += gi * ai;
                            }
                        }
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                if !self.needs(x) {
                    return;
                }
                let yv = &node.value;
                let (n, m) = (yv.dim(0), yv.dim(1));
                let dx = self.slot(grads, x);
                for r in 0..n {
                    let y = &yv.data()[r * m..(r + 1) * m];
                    let go = &g.data()[r * m..(r + 1) * m];
                    let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                    for ((d, &yi), &gi) in dx.data_mut()[r * m..(r + 1) * m]
                        .iter_mut()
                        .zip(y)
                        .zip(go)
                    {
                        *d += yi * (gi - dot);
                    }
                }
            }
            Op::ColSlice { x, start, len } => {
                if !self.needs(x) {
                    return;
                }
                let c = self.value(x).dim(1);
                let n = self.value(x).dim(0);
                let dx = self.slot(grads, x);
                for r in 0..n {
                    for (d, &gi) in dx.data_mut()[r * c + start..r * c + start + len]
                        .iter_mut()
                        .zip(&g.data()[r * len..(r + 1) * len])
                    {
                        *d += gi;
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let (n, ca) = (self.value(a).dim(0), self.value(a).dim(1));
                let cb = self.value(b).dim(1);
                if self.needs(a) {
                    let da = self.slot(grads, a);
                    for r in 0..n {
                        for (d, &gi) in da.data_mut()[r * ca..(r + 1) * ca]
                            .iter_mut()
                            .zip(&g.data()[r * (ca + cb)..r * (ca + cb) + ca])
                        {
                            *d += gi;
                        }
                    }
                }
                if self.needs(b) {
                    let db = self.slot(grads, b);
                    for r in 0..n {
                        for (d, &gi) in db.data_mut()[r * cb..(r + 1) * cb]
                            .iter_mut()
                            .zip(&g.data()[r * (ca + cb) + ca..(r + 1) * (ca + cb)])
                        {
                            *d += gi;
                        }
                    }
                }
            }
            Op::GridToTokens { x } => {
                if !self.needs(x) {
                    return;
                }
                let (c, hw) = (self.value(x).dim(0), self.value(x).dim(1) * self.value(x).dim(2));
                let dx = self.slot(grads, x);
                for p in 0..hw {
                    for ci in 0..c {
                        dx.data_mut()[ci * hw + p] += g.data()[p * c + ci];
                    }
                }
            }
            Op::TokensToGrid { x, h, w } => {
                if !self.needs(x) {
                    return;
                }
                let c = self.value(x).dim(1);
                let dx = self.slot(grads, x);
                for p in 0..h * w {
                    for ci in 0..c {
                        dx.data_mut()[p * c + ci] += g.data()[ci * h * w + p];
                    }
                }
            }
            Op::SpatialCosineMean { a, b, eps } => {
                let gscale = g.item();
                let av = self.value(a);
                let bv = self.value(b);
                let (c, hw) = (av.dim(0), av.dim(1) * av.dim(2));
                let scale = gscale / hw as f64;
                // Per-location cosine gradient; write into both parents.
                let needs_a = self.needs(a);
                let needs_b = self.needs(b);
                let av_c = av.clone();
                let bv_c = bv.clone();
                for p in 0..hw {
                    let mut dot = 0.0;
                    let mut na2 = 0.0;
                    let mut nb2 = 0.0;
                    for ci in 0..c {
                        let x = av_c.data()[ci * hw + p];
                        let y = bv_c.data()[ci * hw + p];
                        dot += x * y;
                        na2 += x * x;
                        nb2 += y * y;
                    }
                    let root = (na2 * nb2).sqrt();
                    // Below the guard the denominator is the constant `eps`;
                    // the norm-direction term vanishes.
                    let guarded = root <= eps;
                    let denom = if guarded { eps } else { root };
                    if needs_a {
                        let da = self.slot(grads, a);
                        for ci in 0..c {
                            let x = av_c.data()[ci * hw + p];
                            let y = bv_c.data()[ci * hw + p];
                            let norm_term = if guarded {
                                0.0
                            } else {
                                dot * x * nb2 / (root * root * root)
                            };
                            da.data_mut()[ci * hw + p] += scale * (y / denom - norm_term);
                        }
                    }
                    if needs_b {
                        let db = self.slot(grads, b);
                        for ci in 0..c {
                            let x = av_c.data()[ci * hw + p];
                            let y = bv_c.data()[ci * hw + p];
                            let norm_term = if guarded {
                                0.0
                            } else {
                                dot * y * na2 / (root * root * root)
                            };
                            db.data_mut()[ci * hw + p] += scale * (x / denom - norm_term);
                        }
                    }
                }
            }
            Op::CrossEntropyLogits { x, label } => {
                if !self.needs(x) {
                    return;
                }
                let gscale = g.item();
                let xv = self.value(x).clone();
                let k = xv.dim(1);
                let max = xv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = xv.data().iter().map(|v| (v - max).exp()).sum();
                let dx = self.slot(grads, x);
                for i in 0..k {
                    let p = (xv.data()[i] - max).exp() / sum;
                    dx.data_mut()[i] += gscale * (p - if i == label { 1.0 } else { 0.0 });
                }
            }
            Op::SumAll { x } => {
                if self.needs(x) {
                    let gi = g.item();
                    let dx = self.slot(grads, x);
                    for d in dx.data_mut() {
                        *d += gi;
                    }
                }
            }
        }
    }

    fn slot<'a>(&self, grads: &'a mut Vec<Option<Tensor>>, id: NodeId) -> &'a mut Tensor {
        let shape: Vec<usize> = self.value(id).shape().to_vec();
        grads[id.0].get_or_insert_with(|| Tensor::zeros(&shape))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Forward value of the spatial-cosine reduction, shared with the pure
/// distortion-score path.
pub(crate) fn spatial_cosine_mean_value(a: &Tensor, b: &Tensor, eps: f64) -> f64 {
    let (c, hw) = (a.dim(0), a.dim(1) * a.dim(2));
    let mut total = 0.0;
    for p in 0..hw {
        let mut dot = 0.0;
        let mut na2 = 0.0;
        let mut nb2 = 0.0;
        for ci in 0..c {
            let x = a.data()[ci * hw + p];
            let y = b.data()[ci * hw + p];
            dot += x * y;
            na2 += x * x;
            nb2 += y * y;
        }
        let denom = (na2 * nb2).sqrt().max(eps);
        total += (dot / denom).clamp(-1.0, 1.0);
    }
    total / hw as f64
}

pub(crate) fn cross_entropy_value(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let (co, k) = (w.dim(0), w.dim(2));
    if w.dim(3) != k {
        return Err(CdreError::InvalidArgument("non-square kernel".into()));
    }
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(CdreError::InputBelowMinimumSize);
    }
    let (oh, ow) = (conv_out_dim(h, k, stride, pad), conv_out_dim(wd, k, stride, pad));
    let mut out = Tensor::zeros(&[co, oh, ow]);
    if let Some(b) = b {
        for oc in 0..co {
            let bv = b.data()[oc];
            for v in &mut out.data_mut()[oc * oh * ow..(oc + 1) * oh * ow] {
                *v = bv;
            }
        }
    }
    for oc in 0..co {
        for ic in 0..ci {
            let xplane = &x.data()[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w.data()[((oc * ci + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (oy0, oy1) = valid_range(oh, h, ky, stride, pad);
                    let (ox0, ox1) = valid_range(ow, wd, kx, stride, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let orow = oc * oh * ow + oy * ow;
                        let irow = iy * wd;
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kx - pad;
                            out.data_mut()[orow + ox] += wv * xplane[irow + ix];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Output rows for which `oy*stride + ky - pad` lands inside `[0, n)`.
fn valid_range(o: usize, n: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    // iy <= n-1  =>  oy <= (n-1+pad-k)/stride
    let hi = if n + pad > k {
        ((n - 1 + pad - k) / stride + 1).min(o)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    dx: Option<&mut Tensor>,
) {
    let Some(dx) = dx else { return };
    let (ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let (co, k) = (w.dim(0), w.dim(2));
    let (oh, ow) = (g.dim(1), g.dim(2));
    for oc in 0..co {
        for ic in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w.data()[((oc * ci + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (oy0, oy1) = valid_range(oh, h, ky, stride, pad);
                    let (ox0, ox1) = valid_range(ow, wd, kx, stride, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kx - pad;
                            dx.data_mut()[ic * h * wd + iy * wd + ix] +=
                                wv * g.data()[oc * oh * ow + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_w(x: &Tensor, g: &Tensor, stride: usize, pad: usize, dw: &mut Tensor) {
    let (ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let (co, k) = (dw.dim(0), dw.dim(2));
    let (oh, ow) = (g.dim(1), g.dim(2));
    for oc in 0..co {
        for ic in 0..ci {
            let xplane = &x.data()[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let (oy0, oy1) = valid_range(oh, h, ky, stride, pad);
                    let (ox0, ox1) = valid_range(ow, wd, kx, stride, pad);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kx - pad;
                            acc += g.data()[oc * oh * ow + oy * ow + ox] * xplane[iy * wd + ix];
                        }
                    }
                    dw.data_mut()[((oc * ci + ic) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

//! Toy four-stage backbones with embedding hook points.
//!
//! Stand-ins for the production CNN/transformer downstream models: four
//! stages at overall strides /4, /8, /16, /32, a classification head,
//! and an optional distortion-embedding applied to each stage output
//! before the next stage consumes it.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{Embedding, NUM_STAGES};
use crate::error::{CdreError, Result};
use crate::extractor::{LEAKY_SLOPE, NORM_EPS};
use crate::graph::{cross_entropy_value, NodeId, Tape};
use crate::nn::{Conv2d, Init, LayerCost, Linear, ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;
pub const CNN_STAGE_DIMS: [usize; 4] = [16, 32, 64, 128];
pub const TRANSFORMER_STAGE_DIMS: [usize; 4] = [24, 48, 96, 192];
/// Patch size of the transformer stem.
pub const PATCH: usize = 4;
/// Transformer blocks per stage.
const BLOCKS_PER_STAGE: usize = 2;
/// Self-attention heads inside backbone blocks.
const SELF_ATTN_HEADS: usize = 2;
/// The transformer's learned positional table fixes its input size.
pub const TRANSFORMER_INPUT_SIDE: usize = 64;

pub const MIN_INPUT_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneFamily {
    Cnn,
    Transformer,
}

impl BackboneFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cnn => "cnn",
            Self::Transformer => "transformer",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Self::Cnn),
            "transformer" => Ok(Self::Transformer),
            other => Err(CdreError::InvalidArgument(format!(
                "unknown backbone family `{other}`"
            ))),
        }
    }

    pub fn default_dims(self) -> [usize; 4] {
        match self {
            Self::Cnn => CNN_STAGE_DIMS,
            Self::Transformer => TRANSFORMER_STAGE_DIMS,
        }
    }
}

/// Declared structure of a downstream backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneSpec {
    pub family: BackboneFamily,
    pub stage_dims: [usize; 4],
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stage_dims.iter().any(|&d| d == 0) {
            return Err(CdreError::InvalidArgument(
                "stage dims must be positive".to_string(),
            ));
        }
        if self.stage_dims.windows(2).any(|w| w[1] < w[0]) {
            return Err(CdreError::InvalidArgument(
                "stage dims must be nondecreasing".to_string(),
            ));
        }
        if self.family == BackboneFamily::Transformer
            && self.stage_dims.iter().any(|&d| d % SELF_ATTN_HEADS != 0)
        {
            return Err(CdreError::InvalidArgument(
                "transformer dims must be divisible by the head count".to_string(),
            ));
        }
        Ok(())
    }
}

/// Stage features and logits of one forward pass (tape nodes).
#[derive(Debug)]
pub struct BackboneOut {
    pub stages: [NodeId; 4],
    pub logits: NodeId,
}

struct CnnStage {
    conv1: Conv2d,
    conv2: Conv2d,
}

pub struct ToyCnnBackbone {
    stages: [CnnStage; 4],
    head: Linear,
    pub spec: BackboneSpec,
}

impl ToyCnnBackbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, stage_dims: [usize; 4]) -> Self {
        let spec = BackboneSpec {
            family: BackboneFamily::Cnn,
            stage_dims,
        };
        let mut stages = Vec::with_capacity(4);
        let mut in_c = 3;
        for (i, &out_c) in stage_dims.iter().enumerate() {
            // Stage 1 downsamples twice (/4 overall); later stages refine
            // at their own scale after one stride-2 conv.
            let second_stride = if i == 0 { 2 } else { 1 };
            let conv1 = Conv2d::new(
                store, rng,
                &format!("backbone.stage{}.conv1", i + 1),
                ParamGroup::Backbone,
                in_c, out_c, 3, 2, 1, false, Init::KaimingUniform,
            );
            let conv2 = Conv2d::new(
                store, rng,
                &format!("backbone.stage{}.conv2", i + 1),
                ParamGroup::Backbone,
                out_c, out_c, 3, second_stride, 1, false, Init::KaimingUniform,
            );
            stages.push(CnnStage { conv1, conv2 });
            in_c = out_c;
        }
        let head = Linear::new(
            store, rng, "head.fc", ParamGroup::Head,
            stage_dims[3], NUM_CLASSES, true, Init::KaimingUniform,
        );
        Self {
            stages: stages.try_into().ok().unwrap(),
            head,
            spec,
        }
    }

    fn stage(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, i: usize) -> Result<NodeId> {
        let c = self.stages[i].conv1.forward(tape, store, x)?;
        let n = tape.instance_norm(c, NORM_EPS)?;
        let x = tape.leaky_relu(n, LEAKY_SLOPE);
        let c = self.stages[i].conv2.forward(tape, store, x)?;
        let n = tape.instance_norm(c, NORM_EPS)?;
        Ok(tape.leaky_relu(n, LEAKY_SLOPE))
    }

    pub fn costs(&self, h: usize, w: usize) -> Vec<LayerCost> {
        let mut dims = (h, w);
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push(LayerCost {
                name: format!("backbone.stage{}.conv1", i + 1),
                group: ParamGroup::Backbone,
                params: s.conv1.param_count(),
                macs: s.conv1.macs(dims.0, dims.1),
            });
            dims = s.conv1.out_dims(dims.0, dims.1);
            out.push(LayerCost {
                name: format!("backbone.stage{}.conv2", i + 1),
                group: ParamGroup::Backbone,
                params: s.conv2.param_count(),
                macs: s.conv2.macs(dims.0, dims.1),
            });
            dims = s.conv2.out_dims(dims.0, dims.1);
        }
        out.push(LayerCost {
            name: "head".to_string(),
            group: ParamGroup::Head,
            params: self.head.param_count(),
            macs: self.head.macs(1),
        });
        out
    }
}

struct SelfAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    dim: usize,
}

impl SelfAttention {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        let mk = |store: &mut ParamStore, rng: &mut ChaCha8Rng, suffix: &str| {
            Linear::new(
                store, rng, &format!("{name}.{suffix}"), ParamGroup::Backbone,
                dim, dim, false, Init::KaimingUniform,
            )
        };
        let wq = mk(store, rng, "wq");
        let wk = mk(store, rng, "wk");
        let wv = mk(store, rng, "wv");
        let wo = Linear::new(
            store, rng, &format!("{name}.wo"), ParamGroup::Backbone,
            dim, dim, true, Init::KaimingUniform,
        );
        Self { wq, wk, wv, wo, dim }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let q = self.wq.forward(tape, store, x)?;
        let k = self.wk.forward(tape, store, x)?;
        let v = self.wv.forward(tape, store, x)?;
        let head_dim = self.dim / SELF_ATTN_HEADS;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(SELF_ATTN_HEADS);
        for h in 0..SELF_ATTN_HEADS {
            let qh = tape.col_slice(q, h * head_dim, head_dim)?;
            let kh = tape.col_slice(k, h * head_dim, head_dim)?;
            let vh = tape.col_slice(v, h * head_dim, head_dim)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.affine(scores, scale, 0.0);
            let attn = tape.softmax_rows(scaled)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let mut merged = outs[0];
        for &o in &outs[1..] {
            merged = tape.concat_cols(merged, o)?;
        }
        self.wo.forward(tape, store, merged)
    }

    fn param_count(&self) -> usize {
        self.wq.param_count()
            + self.wk.param_count()
            + self.wv.param_count()
            + self.wo.param_count()
    }

    fn macs(&self, tokens: usize) -> u64 {
        // projections only; the attention matmuls are parameter-free
        self.wq.macs(tokens) + self.wk.macs(tokens) + self.wv.macs(tokens) + self.wo.macs(tokens)
    }
}

struct TransformerBlock {
    attn: SelfAttention,
    mlp: crate::embedding::Mlp,
}

impl TransformerBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        let attn = SelfAttention::new(store, rng, &format!("{name}.attn"), dim);
        let mlp = crate::embedding::Mlp::new(
            store, rng, &format!("{name}.mlp"), ParamGroup::Backbone, dim, 4 * dim, dim,
        );
        Self { attn, mlp }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let n1 = tape.layer_norm_rows(x, NORM_EPS)?;
        let a = self.attn.forward(tape, store, n1)?;
        let x = tape.add(x, a)?;
        let n2 = tape.layer_norm_rows(x, NORM_EPS)?;
        let m = self.mlp.forward(tape, store, n2)?;
        tape.add(x, m)
    }
}

pub struct ToyTransformerBackbone {
    patch: Conv2d,
    pos: crate::nn::ParamId,
    stages: [[TransformerBlock; BLOCKS_PER_STAGE]; 4],
    merges: [Conv2d; 3],
    head: Linear,
    pub spec: BackboneSpec,
}

impl ToyTransformerBackbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, stage_dims: [usize; 4]) -> Self {
        let spec = BackboneSpec {
            family: BackboneFamily::Transformer,
            stage_dims,
        };
        let patch = Conv2d::new(
            store, rng, "backbone.patch.conv", ParamGroup::Backbone,
            3, stage_dims[0], PATCH, PATCH, 0, true, Init::KaimingUniform,
        );
        let grid = TRANSFORMER_INPUT_SIDE / PATCH;
        let pos = store.add(
            "backbone.pos_embedding",
            ParamGroup::Backbone,
            Init::KaimingUniform.sample(rng, &[grid * grid, stage_dims[0]], stage_dims[0]),
        );
        let mut stages = Vec::with_capacity(4);
        for (i, &dim) in stage_dims.iter().enumerate() {
            let blocks: Vec<TransformerBlock> = (0..BLOCKS_PER_STAGE)
                .map(|b| {
                    TransformerBlock::new(
                        store, rng,
                        &format!("backbone.stage{}.block{}", i + 1, b + 1),
                        dim,
                    )
                })
                .collect();
            stages.push(blocks.try_into().ok().unwrap());
        }
        let merges: Vec<Conv2d> = (0..3)
            .map(|i| {
                Conv2d::new(
                    store, rng,
                    &format!("backbone.merge{}.conv", i + 1),
                    ParamGroup::Backbone,
                    stage_dims[i], stage_dims[i + 1], 2, 2, 0, true, Init::KaimingUniform,
                )
            })
            .collect();
        let head = Linear::new(
            store, rng, "head.fc", ParamGroup::Head,
            stage_dims[3], NUM_CLASSES, true, Init::KaimingUniform,
        );
        Self {
            patch,
            pos,
            stages: stages.try_into().ok().unwrap(),
            merges: merges.try_into().ok().unwrap(),
            head,
            spec,
        }
    }

    /// Token grid side at stage `i` (0-based).
    fn grid_side(&self, stage: usize) -> usize {
        TRANSFORMER_INPUT_SIDE / PATCH / (1 << stage)
    }

    pub fn costs(&self, _h: usize, _w: usize) -> Vec<LayerCost> {
        let mut out = Vec::new();
        let grid = TRANSFORMER_INPUT_SIDE / PATCH;
        out.push(LayerCost {
            name: "backbone.patch".to_string(),
            group: ParamGroup::Backbone,
            params: self.patch.param_count()
                + grid * grid * self.spec.stage_dims[0],
            macs: self.patch.macs(TRANSFORMER_INPUT_SIDE, TRANSFORMER_INPUT_SIDE),
        });
        for (i, blocks) in self.stages.iter().enumerate() {
            let tokens = self.grid_side(i) * self.grid_side(i);
            for (b, block) in blocks.iter().enumerate() {
                out.push(LayerCost {
                    name: format!("backbone.stage{}.block{}", i + 1, b + 1),
                    group: ParamGroup::Backbone,
                    params: block.attn.param_count() + block.mlp.param_count(),
                    macs: block.attn.macs(tokens) + block.mlp.macs(tokens),
                });
            }
            if i < 3 {
                let side = self.grid_side(i);
                out.push(LayerCost {
                    name: format!("backbone.merge{}", i + 1),
                    group: ParamGroup::Backbone,
                    params: self.merges[i].param_count(),
                    macs: self.merges[i].macs(side, side),
                });
            }
        }
        out.push(LayerCost {
            name: "head".to_string(),
            group: ParamGroup::Head,
            params: self.head.param_count(),
            macs: self.head.macs(1),
        });
        out
    }
}

/// A downstream model of either family.
pub enum Backbone {
    Cnn(ToyCnnBackbone),
    Transformer(ToyTransformerBackbone),
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, spec: BackboneSpec) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.family {
            BackboneFamily::Cnn => Self::Cnn(ToyCnnBackbone::new(store, rng, spec.stage_dims)),
            BackboneFamily::Transformer => {
                Self::Transformer(ToyTransformerBackbone::new(store, rng, spec.stage_dims))
            }
        })
    }

    pub fn spec(&self) -> BackboneSpec {
        match self {
            Self::Cnn(b) => b.spec,
            Self::Transformer(b) => b.spec,
        }
    }

    pub fn family(&self) -> BackboneFamily {
        self.spec().family
    }

    /// Forward pass with optional distortion embedding. `embed` carries
    /// the embedding module, the transformed features `d_1..d_4`, and the
    /// embedding depth; stages past the depth run unmodified.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: NodeId,
        embed: Option<(&Embedding, &[NodeId], usize)>,
    ) -> Result<BackboneOut> {
        if let Some((embedding, features, depth)) = embed {
            let wants_cnn = matches!(self, Self::Cnn(_));
            if embedding.is_cnn() != wants_cnn {
                return Err(CdreError::InvalidArgument(
                    "embedding variant does not match backbone family".to_string(),
                ));
            }
            if features.len() < depth.min(NUM_STAGES) {
                return Err(CdreError::MissingComponent(
                    "transformed distortion features for every embedded stage".to_string(),
                ));
            }
        }
        let shape = tape.value(image).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(CdreError::InvalidArgument(format!(
                "expected [3, H, W] image, got {shape:?}"
            )));
        }
        if shape[1] < MIN_INPUT_SIDE || shape[2] < MIN_INPUT_SIDE {
            return Err(CdreError::InputBelowMinimumSize);
        }
        match self {
            Self::Cnn(b) => {
                let mut x = image;
                let mut stages = Vec::with_capacity(4);
                for i in 0..4 {
                    x = b.stage(tape, store, x, i)?;
                    if let Some((embedding, features, depth)) = embed {
                        if i < depth {
                            x = embedding.embed_stage(tape, store, i, x, features[i])?;
                        }
                    }
                    stages.push(x);
                }
                let pooled = tape.global_avg_pool(x)?;
                let logits = b.head.forward(tape, store, pooled)?;
                Ok(BackboneOut {
                    stages: stages.try_into().ok().unwrap(),
                    logits,
                })
            }
            Self::Transformer(b) => {
                if shape[1] != TRANSFORMER_INPUT_SIDE || shape[2] != TRANSFORMER_INPUT_SIDE {
                    return Err(CdreError::InvalidArgument(format!(
                        "transformer backbone expects {TRANSFORMER_INPUT_SIDE}x{TRANSFORMER_INPUT_SIDE} inputs, got {}x{}",
                        shape[1], shape[2]
                    )));
                }
                let grid = b.patch.forward(tape, store, image)?;
                let mut x = tape.grid_to_tokens(grid)?;
                let pos = store.bind(tape, b.pos);
                x = tape.add(x, pos)?;
                let mut stages = Vec::with_capacity(4);
                for i in 0..4 {
                    for block in &b.stages[i] {
                        x = block.forward(tape, store, x)?;
                    }
                    if let Some((embedding, features, depth)) = embed {
                        if i < depth {
                            x = embedding.embed_stage(tape, store, i, x, features[i])?;
                        }
                    }
                    stages.push(x);
                    if i < 3 {
                        let side = b.grid_side(i);
                        let g = tape.tokens_to_grid(x, side, side)?;
                        let merged = b.merges[i].forward(tape, store, g)?;
                        x = tape.grid_to_tokens(merged)?;
                    }
                }
                let pooled = tape.mean_rows(x)?;
                let logits = b.head.forward(tape, store, pooled)?;
                Ok(BackboneOut {
                    stages: stages.try_into().ok().unwrap(),
                    logits,
                })
            }
        }
    }

    pub fn costs(&self, h: usize, w: usize) -> Vec<LayerCost> {
        match self {
            Self::Cnn(b) => b.costs(h, w),
            Self::Transformer(b) => b.costs(h, w),
        }
    }
}

/// Cross-entropy task loss on raw logits.
pub fn task_loss(logits: &Tensor, label: usize) -> Result<f64> {
    let k = *logits.shape().last().unwrap_or(&0);
    if logits.len() != k || k == 0 {
        return Err(CdreError::InvalidArgument(
            "logits must be a single [K] or [1, K] row".to_string(),
        ));
    }
    if label >= k {
        return Err(CdreError::InvalidArgument(format!(
            "label {label} out of range for {k} classes"
        )));
    }
    Ok(cross_entropy_value(logits.data(), label))
}

/// Index of the largest logit (first index wins ties).
pub fn argmax(logits: &Tensor) -> usize {
    let mut best = 0;
    let mut bv = f64::NEG_INFINITY;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > bv {
            bv = v;
            best = i;
        }
    }
    best
}

/// Top-1 accuracy.
pub fn task_metric(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(CdreError::InvalidArgument(
            "predictions and labels must be nonempty and equal-length".to_string(),
        ));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

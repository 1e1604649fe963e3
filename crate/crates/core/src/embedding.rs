//! Progressive distortion-feature transformation and residual embedding.
//!
//! The decoded distortion feature is transformed stage by stage so its
//! dimensions track the downstream backbone, then injected residually:
//! CNN stages gate the distortion feature with spatial attention over
//! `concat(f, d)` and channel attention over the gated result, closing
//! with a zero-initialized 1×1 conv; transformer stages cross-attend
//! from backbone tokens to distortion tokens, closing with a
//! zero-initialized output projection. Zero initialization makes every
//! stage an exact identity before training.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_mismatch, CdreError, Result};
use crate::graph::{NodeId, Tape};
use crate::nn::{Conv2d, Init, LayerCost, Linear, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Number of backbone stages the embedding can attach to.
pub const NUM_STAGES: usize = 4;
/// Attention heads of the cross-attention embedding.
pub const CROSS_ATTN_HEADS: usize = 2;
/// Channel-attention bottleneck reduction.
const CA_REDUCTION: usize = 4;

/// Validated embedding depth: only stages `1..=depth` receive embedding.
pub fn validate_depth(depth: usize) -> Result<usize> {
    if (1..=NUM_STAGES).contains(&depth) {
        Ok(depth)
    } else {
        Err(CdreError::InvalidArgument(format!(
            "embedding depth {depth} outside 1..={NUM_STAGES}"
        )))
    }
}

/// Transformed distortion features `d_1..d_4`, dimension-matched to the
/// backbone stages.
#[derive(Clone, Debug)]
pub enum EmbeddingFeatureSet {
    Cnn(Vec<Tensor>),
    Tokens(Vec<Tensor>),
}

impl EmbeddingFeatureSet {
    pub fn len(&self) -> usize {
        match self {
            Self::Cnn(v) | Self::Tokens(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---- CNN variant ------------------------------------------------------

/// Conv → instance-norm → rectifier chain from the decoded feature to
/// stage-matched dims: 1/4 scale first, then halving per stage.
pub struct CnnTransform {
    convs: [Conv2d; NUM_STAGES],
}

impl CnnTransform {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        stage_dims: [usize; NUM_STAGES],
    ) -> Self {
        let first = Conv2d::new(
            store, rng, "transform.cnn1.conv", ParamGroup::Transform,
            in_channels, stage_dims[0], 5, 4, 2, false, Init::KaimingUniform,
        );
        let mut convs = alloc::vec![first];
        for i in 1..NUM_STAGES {
            convs.push(Conv2d::new(
                store, rng,
                &format!("transform.cnn{}.conv", i + 1),
                ParamGroup::Transform,
                stage_dims[i - 1], stage_dims[i], 3, 2, 1, false, Init::KaimingUniform,
            ));
        }
        Self {
            convs: convs.try_into().ok().unwrap(),
        }
    }

    /// One transformation step `d_{i-1} -> d_i` (stage is 0-based).
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        d_prev: NodeId,
        stage: usize,
    ) -> Result<NodeId> {
        let c = self.convs[stage].forward(tape, store, d_prev)?;
        let n = tape.instance_norm(c, crate::extractor::NORM_EPS)?;
        Ok(tape.relu(n))
    }

    pub fn chain(&self, tape: &mut Tape, store: &ParamStore, d0: NodeId, upto: usize) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(upto);
        let mut d = d0;
        for stage in 0..upto {
            d = self.step(tape, store, d, stage)?;
            out.push(d);
        }
        Ok(out)
    }

    pub fn costs(&self, h: usize, w: usize) -> Vec<LayerCost> {
        let mut dims = (h, w);
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            out.push(LayerCost {
                name: format!("transform.cnn{}", i + 1),
                group: ParamGroup::Transform,
                params: conv.param_count(),
                macs: conv.macs(dims.0, dims.1),
            });
            dims = conv.out_dims(dims.0, dims.1);
        }
        out
    }
}

/// One CNN embedding stage: spatial gate → channel gate → zero-init
/// 1×1 conv → residual add.
pub struct CnnEmbedStage {
    sa_conv: Conv2d,
    ca_fc1: Linear,
    ca_fc2: Linear,
    out_conv: Conv2d,
    channels: usize,
}

impl CnnEmbedStage {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, stage: usize, channels: usize) -> Self {
        let prefix = format!("embed.cnn{}", stage + 1);
        let sa_conv = Conv2d::new(
            store, rng, &format!("{prefix}.sa.conv"), ParamGroup::Embed,
            2, 1, 7, 1, 3, true, Init::KaimingUniform,
        );
        let squeezed = (channels / CA_REDUCTION).max(1);
        let ca_fc1 = Linear::new(
            store, rng, &format!("{prefix}.ca.fc1"), ParamGroup::Embed,
            channels, squeezed, true, Init::KaimingUniform,
        );
        let ca_fc2 = Linear::new(
            store, rng, &format!("{prefix}.ca.fc2"), ParamGroup::Embed,
            squeezed, channels, true, Init::KaimingUniform,
        );
        let out_conv = Conv2d::new(
            store, rng, &format!("{prefix}.out.conv"), ParamGroup::Embed,
            channels, channels, 1, 1, 0, true, Init::Zeros,
        );
        Self {
            sa_conv,
            ca_fc1,
            ca_fc2,
            out_conv,
            channels,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f: NodeId,
        d: NodeId,
    ) -> Result<NodeId> {
        tape.value(f).same_shape(tape.value(d))?;
        if tape.value(f).dim(0) != self.channels {
            return Err(shape_mismatch(
                &[self.channels],
                &[tape.value(f).dim(0)],
            ));
        }
        // Spatial attention over both features, gating the distortion map.
        let cat = tape.concat_channels(f, d)?;
        let mm = tape.channel_mean_max(cat)?;
        let sa = self.sa_conv.forward(tape, store, mm)?;
        let sa_gate = tape.sigmoid(sa);
        let gated = tape.mul_spatial_gate(d, sa_gate)?;
        // Channel attention on the gated result.
        let pooled = tape.global_avg_pool(gated)?;
        let squeezed = self.ca_fc1.forward(tape, store, pooled)?;
        let squeezed = tape.relu(squeezed);
        let ca = self.ca_fc2.forward(tape, store, squeezed)?;
        let ca_gate = tape.sigmoid(ca);
        let attended = tape.mul_channel_gate(gated, ca_gate)?;
        let branch = self.out_conv.forward(tape, store, attended)?;
        tape.add(f, branch)
    }

    pub fn costs(&self, h: usize, w: usize) -> Vec<LayerCost> {
        let hw = h * w;
        alloc::vec![
            LayerCost {
                name: "sa".to_string(),
                group: ParamGroup::Embed,
                params: self.sa_conv.param_count(),
                macs: self.sa_conv.macs(h, w),
            },
            LayerCost {
                name: "ca".to_string(),
                group: ParamGroup::Embed,
                params: self.ca_fc1.param_count() + self.ca_fc2.param_count(),
                macs: self.ca_fc1.macs(1) + self.ca_fc2.macs(1),
            },
            LayerCost {
                name: "out".to_string(),
                group: ParamGroup::Embed,
                params: self.out_conv.param_count(),
                macs: (self.channels * self.channels) as u64 * hw as u64,
            },
        ]
    }
}

// ---- transformer variant ----------------------------------------------

/// One-hidden-layer per-token MLP.
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        let l1 = Linear::new(
            store, rng, &format!("{name}.fc1"), group, in_dim, hidden, true,
            Init::KaimingUniform,
        );
        let l2 = Linear::new(
            store, rng, &format!("{name}.fc2"), group, hidden, out_dim, true,
            Init::KaimingUniform,
        );
        Self { l1, l2 }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.l2.forward(tape, store, h)
    }

    pub fn param_count(&self) -> usize {
        self.l1.param_count() + self.l2.param_count()
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        self.l1.macs(tokens) + self.l2.macs(tokens)
    }
}

/// Per-stage MLPs carrying the distortion tokens to stage token dims;
/// token count never changes.
pub struct TokenTransform {
    mlps: [Mlp; NUM_STAGES],
}

impl TokenTransform {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        token_dim: usize,
        stage_dims: [usize; NUM_STAGES],
    ) -> Self {
        let mut mlps = Vec::with_capacity(NUM_STAGES);
        let mut in_dim = token_dim;
        for (i, &out_dim) in stage_dims.iter().enumerate() {
            mlps.push(Mlp::new(
                store, rng,
                &format!("transform.mlp{}", i + 1),
                ParamGroup::Transform,
                in_dim, 2 * in_dim, out_dim,
            ));
            in_dim = out_dim;
        }
        Self {
            mlps: mlps.try_into().ok().unwrap(),
        }
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        d_prev: NodeId,
        stage: usize,
    ) -> Result<NodeId> {
        self.mlps[stage].forward(tape, store, d_prev)
    }

    pub fn chain(&self, tape: &mut Tape, store: &ParamStore, d0: NodeId, upto: usize) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(upto);
        let mut d = d0;
        for stage in 0..upto {
            d = self.step(tape, store, d, stage)?;
            out.push(d);
        }
        Ok(out)
    }

    pub fn costs(&self, tokens: usize) -> Vec<LayerCost> {
        self.mlps
            .iter()
            .enumerate()
            .map(|(i, m)| LayerCost {
                name: format!("transform.mlp{}", i + 1),
                group: ParamGroup::Transform,
                params: m.param_count(),
                macs: m.macs(tokens),
            })
            .collect()
    }
}

/// One cross-attention embedding stage: queries from backbone tokens,
/// keys/values from distortion tokens, zero-init output projection,
/// residual add.
pub struct TokenEmbedStage {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl TokenEmbedStage {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, stage: usize, dim: usize) -> Self {
        debug_assert!(dim % CROSS_ATTN_HEADS == 0);
        let prefix = format!("embed.xattn{}", stage + 1);
        let wq = Linear::new(
            store, rng, &format!("{prefix}.wq"), ParamGroup::Embed, dim, dim, false,
            Init::KaimingUniform,
        );
        let wk = Linear::new(
            store, rng, &format!("{prefix}.wk"), ParamGroup::Embed, dim, dim, false,
            Init::KaimingUniform,
        );
        let wv = Linear::new(
            store, rng, &format!("{prefix}.wv"), ParamGroup::Embed, dim, dim, false,
            Init::KaimingUniform,
        );
        let wo = Linear::new(
            store, rng, &format!("{prefix}.wo"), ParamGroup::Embed, dim, dim, true,
            Init::Zeros,
        );
        Self {
            wq,
            wk,
            wv,
            wo,
            dim,
            heads: CROSS_ATTN_HEADS,
        }
    }

    /// Returns the embedded tokens and the per-head attention maps.
    pub fn forward_with_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f: NodeId,
        d: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        if tape.value(f).rank() != 2 || tape.value(f).dim(1) != self.dim {
            return Err(shape_mismatch(&[0, self.dim], tape.value(f).shape()));
        }
        if tape.value(d).rank() != 2 || tape.value(d).dim(1) != self.dim {
            return Err(shape_mismatch(&[0, self.dim], tape.value(d).shape()));
        }
        let q = self.wq.forward(tape, store, f)?;
        let k = self.wk.forward(tape, store, d)?;
        let v = self.wv.forward(tape, store, d)?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut attns = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.col_slice(q, h * head_dim, head_dim)?;
            let kh = tape.col_slice(k, h * head_dim, head_dim)?;
            let vh = tape.col_slice(v, h * head_dim, head_dim)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.affine(scores, scale, 0.0);
            let attn = tape.softmax_rows(scaled)?;
            attns.push(attn);
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let mut merged = head_outs[0];
        for &h in &head_outs[1..] {
            merged = tape.concat_cols(merged, h)?;
        }
        let projected = self.wo.forward(tape, store, merged)?;
        let out = tape.add(f, projected)?;
        Ok((out, attns))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f: NodeId,
        d: NodeId,
    ) -> Result<NodeId> {
        Ok(self.forward_with_attention(tape, store, f, d)?.0)
    }

    pub fn costs(&self, f_tokens: usize, d_tokens: usize) -> Vec<LayerCost> {
        alloc::vec![LayerCost {
            name: "xattn".to_string(),
            group: ParamGroup::Embed,
            params: self.wq.param_count()
                + self.wk.param_count()
                + self.wv.param_count()
                + self.wo.param_count(),
            macs: self.wq.macs(f_tokens)
                + self.wk.macs(d_tokens)
                + self.wv.macs(d_tokens)
                + self.wo.macs(f_tokens),
        }]
    }
}

// ---- variant wrapper ----------------------------------------------------

pub struct CnnEmbedding {
    pub transform: CnnTransform,
    pub stages: Vec<CnnEmbedStage>,
}

pub struct TokenEmbedding {
    pub transform: TokenTransform,
    pub stages: Vec<TokenEmbedStage>,
}

/// Embedding pipeline for one backbone family.
pub enum Embedding {
    Cnn(CnnEmbedding),
    Token(TokenEmbedding),
}

impl Embedding {
    pub fn new_cnn(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        decoded_channels: usize,
        stage_dims: [usize; NUM_STAGES],
    ) -> Self {
        let transform = CnnTransform::new(store, rng, decoded_channels, stage_dims);
        let stages = stage_dims
            .iter()
            .enumerate()
            .map(|(i, &c)| CnnEmbedStage::new(store, rng, i, c))
            .collect();
        Self::Cnn(CnnEmbedding { transform, stages })
    }

    pub fn new_token(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        token_dim: usize,
        stage_dims: [usize; NUM_STAGES],
    ) -> Self {
        let transform = TokenTransform::new(store, rng, token_dim, stage_dims);
        let stages = stage_dims
            .iter()
            .enumerate()
            .map(|(i, &c)| TokenEmbedStage::new(store, rng, i, c))
            .collect();
        Self::Token(TokenEmbedding { transform, stages })
    }

    /// Builds `d_1..d_upto` from the decoded feature node.
    pub fn transform_chain(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        d0: NodeId,
        upto: usize,
    ) -> Result<Vec<NodeId>> {
        match self {
            Self::Cnn(e) => e.transform.chain(tape, store, d0, upto),
            Self::Token(e) => e.transform.chain(tape, store, d0, upto),
        }
    }

    /// Applies the stage-`i` embedding (0-based) to backbone feature `f`.
    pub fn embed_stage(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        stage: usize,
        f: NodeId,
        d: NodeId,
    ) -> Result<NodeId> {
        match self {
            Self::Cnn(e) => e.stages[stage].forward(tape, store, f, d),
            Self::Token(e) => e.stages[stage].forward(tape, store, f, d),
        }
    }

    pub fn is_cnn(&self) -> bool {
        matches!(self, Self::Cnn(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    const DIMS: [usize; 4] = [16, 32, 64, 128];
    const TOKEN_DIMS: [usize; 4] = [24, 48, 96, 192];

    fn rnd(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let mut rng = crate::rng::stream_rng(seed, "embed-test", 0);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn cnn_transform_shapes() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(1, "init", 0);
        let tr = CnnTransform::new(&mut store, &mut rng, 8, DIMS);
        let mut tape = Tape::new();
        let d0 = tape.constant(rnd(2, &[8, 64, 64], -1.0, 1.0));
        let chain = tr.chain(&mut tape, &store, d0, 4).unwrap();
        assert_eq!(tape.value(chain[0]).shape(), &[16, 16, 16]);
        assert_eq!(tape.value(chain[1]).shape(), &[32, 8, 8]);
        assert_eq!(tape.value(chain[2]).shape(), &[64, 4, 4]);
        assert_eq!(tape.value(chain[3]).shape(), &[128, 2, 2]);
    }

    #[test]
    fn cnn_transform_zero_input_gives_zero() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(3, "init", 0);
        let tr = CnnTransform::new(&mut store, &mut rng, 8, DIMS);
        let mut tape = Tape::new();
        let d0 = tape.constant(Tensor::zeros(&[8, 64, 64]));
        let chain = tr.chain(&mut tape, &store, d0, 4).unwrap();
        for d in chain {
            assert!(tape.value(d).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cnn_embed_identity_at_init() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(4, "init", 0);
        let stage = CnnEmbedStage::new(&mut store, &mut rng, 0, 16);
        let mut tape = Tape::new();
        let f = tape.constant(rnd(5, &[16, 8, 8], -2.0, 2.0));
        let d = tape.constant(rnd(6, &[16, 8, 8], -2.0, 2.0));
        let out = stage.forward(&mut tape, &store, f, d).unwrap();
        assert_eq!(tape.value(out), tape.value(f));
    }

    #[test]
    fn cnn_embed_zero_distortion_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(7, "init", 0);
        let stage = CnnEmbedStage::new(&mut store, &mut rng, 0, 16);
        // make the closing conv non-zero so the identity must come from d = 0
        *store.value_mut(stage.out_conv.w) = rnd(8, &[16, 16, 1, 1], -1.0, 1.0);
        let mut tape = Tape::new();
        let f = tape.constant(rnd(9, &[16, 6, 6], -2.0, 2.0));
        let d = tape.constant(Tensor::zeros(&[16, 6, 6]));
        let out = stage.forward(&mut tape, &store, f, d).unwrap();
        assert_eq!(tape.value(out), tape.value(f));
    }

    #[test]
    fn cnn_embed_shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(10, "init", 0);
        let stage = CnnEmbedStage::new(&mut store, &mut rng, 0, 16);
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[16, 8, 8]));
        let d = tape.constant(Tensor::zeros(&[16, 8, 9]));
        assert!(stage.forward(&mut tape, &store, f, d).is_err());
    }

    /// Step-by-step scalar reimplementation of the CNN embedding branch.
    #[test]
    fn cnn_embed_matches_independent_oracle() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(11, "init", 0);
        let stage = CnnEmbedStage::new(&mut store, &mut rng, 0, 4);
        // give the closing conv real weights so the branch is active
        *store.value_mut(stage.out_conv.w) = rnd(12, &[4, 4, 1, 1], -0.5, 0.5);
        *store.value_mut(stage.out_conv.b.unwrap()) = rnd(13, &[4], -0.1, 0.1);

        let (c, h, w) = (4usize, 5usize, 6usize);
        let f = rnd(14, &[c, h, w], -1.5, 1.5);
        let d = rnd(15, &[c, h, w], -1.5, 1.5);

        let mut tape = Tape::new();
        let fid = tape.constant(f.clone());
        let did = tape.constant(d.clone());
        let out = stage.forward(&mut tape, &store, fid, did).unwrap();
        let got = tape.value(out).clone();

        // independent scalar pipeline
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let hw = h * w;
        // channel mean/max over concat(f, d)
        let mut mm = alloc::vec![0.0f64; 2 * hw];
        for p in 0..hw {
            let mut sum = 0.0;
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                for src in [&f, &d] {
                    let v = src.data()[ci * hw + p];
                    sum += v;
                    if v > max {
                        max = v;
                    }
                }
            }
            mm[p] = sum / (2 * c) as f64;
            mm[hw + p] = max;
        }
        // 7x7 conv, pad 3, 2 -> 1 channels
        let saw = store.value(stage.sa_conv.w).data();
        let sab = store.value(stage.sa_conv.b.unwrap()).data()[0];
        let mut gate_sp = alloc::vec![0.0f64; hw];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = sab;
                for ic in 0..2 {
                    for ky in 0..7isize {
                        for kx in 0..7isize {
                            let iy = y + ky - 3;
                            let ix = x + kx - 3;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                acc += saw[(ic * 7 + ky as usize) * 7 + kx as usize]
                                    * mm[ic * hw + iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
                gate_sp[y as usize * w + x as usize] = sig(acc);
            }
        }
        // spatially gated distortion feature and its channel squeeze
        let mut s = alloc::vec![0.0f64; c * hw];
        let mut pooled = alloc::vec![0.0f64; c];
        for ci in 0..c {
            for p in 0..hw {
                s[ci * hw + p] = d.data()[ci * hw + p] * gate_sp[p];
                pooled[ci] += s[ci * hw + p];
            }
            pooled[ci] /= hw as f64;
        }
        let w1 = store.value(stage.ca_fc1.w).data();
        let b1 = store.value(stage.ca_fc1.b.unwrap()).data();
        let w2 = store.value(stage.ca_fc2.w).data();
        let b2 = store.value(stage.ca_fc2.b.unwrap()).data();
        let sqz = stage.ca_fc1.out_f;
        let mut hidden = alloc::vec![0.0f64; sqz];
        for o in 0..sqz {
            let mut acc = b1[o];
            for i in 0..c {
                acc += w1[o * c + i] * pooled[i];
            }
            hidden[o] = acc.max(0.0);
        }
        let mut gate_ch = alloc::vec![0.0f64; c];
        for o in 0..c {
            let mut acc = b2[o];
            for (i, &hv) in hidden.iter().enumerate() {
                acc += w2[o * sqz + i] * hv;
            }
            gate_ch[o] = sig(acc);
        }
        // channel gate, 1x1 conv, residual
        let ow = store.value(stage.out_conv.w).data();
        let ob = store.value(stage.out_conv.b.unwrap()).data();
        for oc in 0..c {
            for p in 0..hw {
                let mut acc = ob[oc];
                for ic in 0..c {
                    acc += ow[oc * c + ic] * s[ic * hw + p] * gate_ch[ic];
                }
                let expect = f.data()[oc * hw + p] + acc;
                let diff = (got.data()[oc * hw + p] - expect).abs();
                assert!(diff < 1e-6, "mismatch at ({oc},{p}): {diff}");
            }
        }
    }

    #[test]
    fn token_transform_shapes() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(20, "init", 0);
        let tr = TokenTransform::new(&mut store, &mut rng, 24, TOKEN_DIMS);
        let mut tape = Tape::new();
        let d0 = tape.constant(rnd(21, &[4, 24], -1.0, 1.0));
        let chain = tr.chain(&mut tape, &store, d0, 4).unwrap();
        assert_eq!(tape.value(chain[0]).shape(), &[4, 24]);
        assert_eq!(tape.value(chain[1]).shape(), &[4, 48]);
        assert_eq!(tape.value(chain[2]).shape(), &[4, 96]);
        assert_eq!(tape.value(chain[3]).shape(), &[4, 192]);
    }

    #[test]
    fn token_transform_zero_input_gives_zero() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(22, "init", 0);
        let tr = TokenTransform::new(&mut store, &mut rng, 24, TOKEN_DIMS);
        let mut tape = Tape::new();
        let d0 = tape.constant(Tensor::zeros(&[4, 24]));
        let chain = tr.chain(&mut tape, &store, d0, 4).unwrap();
        for d in chain {
            assert!(tape.value(d).data().iter().all(|&v| v == 0.0));
        }
    }

    /// `relu(x) - relu(-x) = x`: an MLP with stacked ±identity weights
    /// reproduces its input exactly.
    #[test]
    fn mlp_identity_construction() {
        let dim = 6;
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(23, "init", 0);
        let mlp = Mlp::new(
            &mut store, &mut rng, "probe", ParamGroup::Transform, dim, 2 * dim, dim,
        );
        let mut w1 = Tensor::zeros(&[2 * dim, dim]);
        let mut w2 = Tensor::zeros(&[dim, 2 * dim]);
        for i in 0..dim {
            w1.data_mut()[i * dim + i] = 1.0;
            w1.data_mut()[(dim + i) * dim + i] = -1.0;
            w2.data_mut()[i * 2 * dim + i] = 1.0;
            w2.data_mut()[i * 2 * dim + dim + i] = -1.0;
        }
        *store.value_mut(mlp.l1.w) = w1;
        *store.value_mut(mlp.l2.w) = w2;
        *store.value_mut(mlp.l1.b.unwrap()) = Tensor::zeros(&[2 * dim]);
        *store.value_mut(mlp.l2.b.unwrap()) = Tensor::zeros(&[dim]);

        let x = rnd(24, &[5, dim], -2.0, 2.0);
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let out = mlp.forward(&mut tape, &store, xid).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn token_embed_identity_at_init() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(25, "init", 0);
        let stage = TokenEmbedStage::new(&mut store, &mut rng, 0, 24);
        let mut tape = Tape::new();
        let f = tape.constant(rnd(26, &[5, 24], -2.0, 2.0));
        let d = tape.constant(rnd(27, &[3, 24], -2.0, 2.0));
        let out = stage.forward(&mut tape, &store, f, d).unwrap();
        assert_eq!(tape.value(out), tape.value(f));
    }

    #[test]
    fn token_embed_single_key_broadcasts_value() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(28, "init", 0);
        let stage = TokenEmbedStage::new(&mut store, &mut rng, 0, 8);
        // activate the output projection
        *store.value_mut(stage.wo.w) = rnd(29, &[8, 8], -0.5, 0.5);
        let mut tape = Tape::new();
        let f = tape.constant(rnd(30, &[4, 8], -1.0, 1.0));
        let d = tape.constant(rnd(31, &[1, 8], -1.0, 1.0));
        let (out, attns) = stage
            .forward_with_attention(&mut tape, &store, f, d)
            .unwrap();
        // softmax over a single key is exactly 1
        for attn in &attns {
            for &v in tape.value(*attn).data() {
                assert_eq!(v, 1.0);
            }
        }
        // every row receives the same projected value
        let fv = tape.value(f);
        let ov = tape.value(out);
        let row0: Vec<f64> = (0..8).map(|c| ov.data()[c] - fv.data()[c]).collect();
        for r in 1..4 {
            for c in 0..8 {
                let delta = ov.data()[r * 8 + c] - fv.data()[r * 8 + c];
                assert!((delta - row0[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn token_embed_attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(32, "init", 0);
        let stage = TokenEmbedStage::new(&mut store, &mut rng, 0, 24);
        let mut tape = Tape::new();
        let f = tape.constant(rnd(33, &[6, 24], -1.0, 1.0));
        let d = tape.constant(rnd(34, &[5, 24], -1.0, 1.0));
        let (_, attns) = stage
            .forward_with_attention(&mut tape, &store, f, d)
            .unwrap();
        for attn in attns {
            let a = tape.value(attn);
            for r in 0..a.dim(0) {
                let sum: f64 = a.data()[r * a.dim(1)..(r + 1) * a.dim(1)].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn token_embed_invariant_to_key_permutation() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(35, "init", 0);
        let stage = TokenEmbedStage::new(&mut store, &mut rng, 0, 8);
        *store.value_mut(stage.wo.w) = rnd(36, &[8, 8], -0.5, 0.5);
        let f = rnd(37, &[4, 8], -1.0, 1.0);
        let d = rnd(38, &[5, 8], -1.0, 1.0);
        let mut d_perm = Tensor::zeros(&[5, 8]);
        let perm = [3usize, 0, 4, 1, 2];
        for (dst, &src) in perm.iter().enumerate() {
            d_perm.data_mut()[dst * 8..(dst + 1) * 8]
                .copy_from_slice(&d.data()[src * 8..(src + 1) * 8]);
        }
        let run = |dt: &Tensor| {
            let mut tape = Tape::new();
            let fid = tape.constant(f.clone());
            let did = tape.constant(dt.clone());
            let out = stage.forward(&mut tape, &store, fid, did).unwrap();
            tape.value(out).clone()
        };
        let a = run(&d);
        let b = run(&d_perm);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn token_embed_dim_mismatch_rejected() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(39, "init", 0);
        let stage = TokenEmbedStage::new(&mut store, &mut rng, 0, 24);
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[4, 24]));
        let d = tape.constant(Tensor::zeros(&[4, 48]));
        assert!(stage.forward(&mut tape, &store, f, d).is_err());
    }

    #[test]
    fn depth_validation() {
        assert!(validate_depth(0).is_err());
        assert!(validate_depth(5).is_err());
        for d in 1..=4 {
            assert_eq!(validate_depth(d).unwrap(), d);
        }
    }

    /// Composite gradient checks of both embedding variants against
    /// central finite differences at 1e-4 relative tolerance.
    #[test]
    fn embed_gradients_match_finite_differences() {
        // CNN variant
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(40, "init", 0);
        let stage = CnnEmbedStage::new(&mut store, &mut rng, 0, 4);
        *store.value_mut(stage.out_conv.w) = rnd(41, &[4, 4, 1, 1], -0.5, 0.5);
        let f0 = rnd(42, &[4, 3, 3], -1.0, 1.0);
        let d0 = rnd(43, &[4, 3, 3], -1.0, 1.0);
        let weights = rnd(44, &[4, 3, 3], 0.1, 1.0);
        let eval = |fv: &Tensor, dv: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let f = tape.input(fv.clone());
            let d = tape.input(dv.clone());
            let out = stage.forward(&mut tape, &store, f, d).unwrap();
            let wn = tape.constant(weights.clone());
            let p = tape.mul(out, wn).unwrap();
            let root = tape.sum_all(p);
            tape.value(root).item()
        };
        let mut tape = Tape::new();
        let f = tape.input(f0.clone());
        let d = tape.input(d0.clone());
        let out = stage.forward(&mut tape, &store, f, d).unwrap();
        let wn = tape.constant(weights.clone());
        let p = tape.mul(out, wn).unwrap();
        let root = tape.sum_all(p);
        let grads = tape.backward(root);
        let h = 1e-5;
        for (tensor, id, label) in [(&f0, f, "f"), (&d0, d, "d")] {
            let got = grads.get(id).unwrap();
            for e in 0..tensor.len() {
                let mut plus = tensor.clone();
                plus.data_mut()[e] += h;
                let mut minus = tensor.clone();
                minus.data_mut()[e] -= h;
                let numeric = if label == "f" {
                    (eval(&plus, &d0) - eval(&minus, &d0)) / (2.0 * h)
                } else {
                    (eval(&f0, &plus) - eval(&f0, &minus)) / (2.0 * h)
                };
                let analytic = got.data()[e];
                let denom = analytic.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "cnn {label}[{e}]: {analytic} vs {numeric}"
                );
            }
        }

        // transformer variant
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(45, "init", 0);
        let stage = TokenEmbedStage::new(&mut store, &mut rng, 0, 8);
        *store.value_mut(stage.wo.w) = rnd(46, &[8, 8], -0.5, 0.5);
        let f0 = rnd(47, &[3, 8], -1.0, 1.0);
        let d0 = rnd(48, &[5, 8], -1.0, 1.0);
        let weights = rnd(49, &[3, 8], 0.1, 1.0);
        let eval = |fv: &Tensor, dv: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let f = tape.input(fv.clone());
            let d = tape.input(dv.clone());
            let out = stage.forward(&mut tape, &store, f, d).unwrap();
            let wn = tape.constant(weights.clone());
            let p = tape.mul(out, wn).unwrap();
            let root = tape.sum_all(p);
            tape.value(root).item()
        };
        let mut tape = Tape::new();
        let f = tape.input(f0.clone());
        let d = tape.input(d0.clone());
        let out = stage.forward(&mut tape, &store, f, d).unwrap();
        let wn = tape.constant(weights.clone());
        let p = tape.mul(out, wn).unwrap();
        let root = tape.sum_all(p);
        let grads = tape.backward(root);
        for (tensor, id, label) in [(&f0, f, "f"), (&d0, d, "d")] {
            let got = grads.get(id).unwrap();
            for e in 0..tensor.len() {
                let mut plus = tensor.clone();
                plus.data_mut()[e] += h;
                let mut minus = tensor.clone();
                minus.data_mut()[e] -= h;
                let numeric = if label == "f" {
                    (eval(&plus, &d0) - eval(&minus, &d0)) / (2.0 * h)
                } else {
                    (eval(&f0, &plus) - eval(&f0, &minus)) / (2.0 * h)
                };
                let analytic = got.data()[e];
                let denom = analytic.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "xattn {label}[{e}]: {analytic} vs {numeric}"
                );
            }
        }
    }
}

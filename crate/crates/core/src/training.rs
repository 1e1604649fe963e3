//! Model bundle, composite loss, and the training regimes.
//!
//! Three regimes: `backbone` pretrains the downstream model alone on
//! original frames; `fd` freezes the downstream model and trains every
//! distortion-pipeline module on compressed inputs; `joint` trains
//! everything, with a lower learning rate on the downstream model.
//! Each training step derives its randomness from `(seed, step)`, so a
//! resumed run replays exactly the same trajectory as an uninterrupted
//! one.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::Rng;

use crate::backbone::{Backbone, BackboneFamily, BackboneOut, BackboneSpec};
use crate::codec::{compress_pair, CodecQuality, ImagePair};
use crate::data::render_sample;
use crate::distortion::{
    quantize, BinaryRepresentation, CnnDecoder, CompactRepresentation, Conditioning,
    DistortionEncoder, TokenDecoder, DEFAULT_LATENT_CHANNELS,
};
use crate::embedding::{validate_depth, Embedding, EmbeddingFeatureSet, NUM_STAGES};
use crate::error::{CdreError, Result};
use crate::extractor::{mean_scale_cosine, FeaturePyramid, SensitiveExtractor};
use crate::graph::{NodeId, Tape};
use crate::nn::{Adam, ParamGroup, ParamId, ParamStore};
use crate::rng::{derive_seed, stream_rng};
use crate::tensor::Tensor;

/// Whether a model carries the distortion pipeline or only the
/// downstream backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Baseline,
    Cdre,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Cdre => "cdre",
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Self::Baseline),
            1 => Ok(Self::Cdre),
            other => Err(CdreError::CheckpointMismatch(alloc::format!(
                "bad model kind tag {other}"
            ))),
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Self::Baseline => 0,
            Self::Cdre => 1,
        }
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub backbone: BackboneSpec,
    pub latent_channels: usize,
    pub embedding_depth: usize,
    pub conditioning: Conditioning,
    pub multi_scale: bool,
    /// Token width of the decoded distortion tokens (transformer family).
    pub token_dim: usize,
}

impl ModelConfig {
    pub fn cdre(family: BackboneFamily) -> Self {
        let dims = family.default_dims();
        Self {
            kind: ModelKind::Cdre,
            backbone: BackboneSpec {
                family,
                stage_dims: dims,
            },
            latent_channels: DEFAULT_LATENT_CHANNELS,
            embedding_depth: NUM_STAGES,
            conditioning: Conditioning::Modulation,
            multi_scale: true,
            token_dim: dims[0],
        }
    }

    pub fn baseline(family: BackboneFamily) -> Self {
        Self {
            kind: ModelKind::Baseline,
            ..Self::cdre(family)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        validate_depth(self.embedding_depth)?;
        if self.latent_channels == 0 || self.latent_channels > 255 {
            return Err(CdreError::InvalidArgument(
                "latent channels must be in 1..=255".to_string(),
            ));
        }
        Ok(())
    }
}

/// A complete model: downstream backbone plus (for `Cdre`) the
/// distortion pipeline around it.
pub struct CdreModel {
    pub store: ParamStore,
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub extractor: Option<SensitiveExtractor>,
    pub encoder: Option<DistortionEncoder>,
    pub cnn_decoder: Option<CnnDecoder>,
    pub token_decoder: Option<TokenDecoder>,
    pub embedding: Option<Embedding>,
}

impl CdreModel {
    /// Builds a model with deterministic parameter initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, "init", 0);
        let mut extractor = None;
        let mut encoder = None;
        let mut cnn_decoder = None;
        let mut token_decoder = None;
        let mut embedding = None;
        if cfg.kind == ModelKind::Cdre {
            extractor = Some(SensitiveExtractor::new(
                &mut store,
                &mut rng,
                cfg.multi_scale,
            ));
            encoder = Some(DistortionEncoder::new(
                &mut store,
                &mut rng,
                cfg.latent_channels,
                cfg.conditioning,
                cfg.multi_scale,
            ));
            match cfg.backbone.family {
                BackboneFamily::Cnn => {
                    cnn_decoder = Some(CnnDecoder::new(&mut store, &mut rng, cfg.latent_channels));
                    embedding = Some(Embedding::new_cnn(
                        &mut store,
                        &mut rng,
                        crate::distortion::DECODED_CHANNELS,
                        cfg.backbone.stage_dims,
                    ));
                }
                BackboneFamily::Transformer => {
                    token_decoder = Some(TokenDecoder::new(
                        &mut store,
                        &mut rng,
                        cfg.latent_channels,
                        cfg.token_dim,
                    ));
                    embedding = Some(Embedding::new_token(
                        &mut store,
                        &mut rng,
                        cfg.token_dim,
                        cfg.backbone.stage_dims,
                    ));
                }
            }
        }
        let backbone = Backbone::new(&mut store, &mut rng, cfg.backbone)?;
        Ok(Self {
            store,
            cfg,
            backbone,
            extractor,
            encoder,
            cnn_decoder,
            token_decoder,
            embedding,
        })
    }

    pub fn is_cdre(&self) -> bool {
        self.cfg.kind == ModelKind::Cdre
    }

    fn cdre_parts(
        &self,
    ) -> Result<(&SensitiveExtractor, &DistortionEncoder, &Embedding)> {
        let missing: Vec<&str> = [
            ("extractor", self.extractor.is_none()),
            ("distortion encoder", self.encoder.is_none()),
            ("embedding", self.embedding.is_none()),
        ]
        .iter()
        .filter(|(_, m)| *m)
        .map(|(n, _)| *n)
        .collect();
        if !missing.is_empty() {
            return Err(CdreError::MissingComponent(missing.join(", ")));
        }
        Ok((
            self.extractor.as_ref().unwrap(),
            self.encoder.as_ref().unwrap(),
            self.embedding.as_ref().unwrap(),
        ))
    }

    /// Distortion-pipeline graph up to the transformed features
    /// `d_1..d_depth`; also returns the latent and bit nodes.
    fn distortion_graph(
        &self,
        tape: &mut Tape,
        orig: NodeId,
        comp: NodeId,
    ) -> Result<(Vec<NodeId>, Vec<NodeId>, Vec<NodeId>, NodeId, NodeId)> {
        let (extractor, encoder, embedding) = self.cdre_parts()?;
        let f_o = extractor.forward(tape, &self.store, orig)?;
        let f_c = extractor.forward(tape, &self.store, comp)?;
        let latent = encoder.forward(tape, &self.store, orig, comp, &f_o, &f_c)?;
        let bits = tape.sigmoid_round_ste(latent);
        let (h, w) = (tape.value(orig).dim(1), tape.value(orig).dim(2));
        let d0 = match self.cfg.backbone.family {
            BackboneFamily::Cnn => {
                let dec = self
                    .cnn_decoder
                    .as_ref()
                    .ok_or_else(|| CdreError::MissingComponent("cnn decoder".to_string()))?;
                dec.forward(tape, &self.store, bits, h, w)?
            }
            BackboneFamily::Transformer => {
                let dec = self
                    .token_decoder
                    .as_ref()
                    .ok_or_else(|| CdreError::MissingComponent("token decoder".to_string()))?;
                dec.forward(tape, &self.store, bits)?
            }
        };
        let d = embedding.transform_chain(tape, &self.store, d0, self.cfg.embedding_depth)?;
        Ok((d, f_o, f_c, latent, bits))
    }

    /// Full forward for one training example.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        pair: &ImagePair,
        label: usize,
        lambda: f64,
    ) -> Result<TrainForward> {
        let comp = tape.constant(pair.compressed.clone());
        if !self.is_cdre() {
            let out = self.backbone.forward(tape, &self.store, comp, None)?;
            let task = tape.cross_entropy_logits(out.logits, label)?;
            return Ok(TrainForward {
                loss: task,
                task,
                reg_terms: Vec::new(),
                logits: out.logits,
                latent: None,
            });
        }
        let orig = tape.constant(pair.original.clone());
        let (d, f_o, f_c, latent, _bits) = self.distortion_graph(tape, orig, comp)?;
        let embedding = self.embedding.as_ref().unwrap();
        let out = self.backbone.forward(
            tape,
            &self.store,
            comp,
            Some((embedding, &d, self.cfg.embedding_depth)),
        )?;
        let task = tape.cross_entropy_logits(out.logits, label)?;
        // regularizer: (1 + cosine) per scale
        let mut reg_terms = Vec::with_capacity(f_o.len());
        for (&a, &b) in f_o.iter().zip(&f_c) {
            let cos = tape.spatial_cosine_mean(a, b, crate::extractor::COSINE_EPS)?;
            reg_terms.push(tape.affine(cos, 1.0, 1.0));
        }
        let mut loss = task;
        if lambda > 0.0 {
            let mut reg_sum = reg_terms[0];
            for &t in &reg_terms[1..] {
                reg_sum = tape.add(reg_sum, t)?;
            }
            let scaled = tape.affine(reg_sum, lambda, 0.0);
            loss = tape.add(task, scaled)?;
        }
        Ok(TrainForward {
            loss,
            task,
            reg_terms,
            logits: out.logits,
            latent: Some(latent),
        })
    }

    /// Inference: logits for a pair (baseline models ignore the original).
    pub fn forward_infer(&self, tape: &mut Tape, pair: &ImagePair) -> Result<BackboneOut> {
        let comp = tape.constant(pair.compressed.clone());
        if !self.is_cdre() {
            return self.backbone.forward(tape, &self.store, comp, None);
        }
        let orig = tape.constant(pair.original.clone());
        let (d, _, _, _, _) = self.distortion_graph(tape, orig, comp)?;
        let embedding = self.embedding.as_ref().unwrap();
        self.backbone.forward(
            tape,
            &self.store,
            comp,
            Some((embedding, &d, self.cfg.embedding_depth)),
        )
    }

    /// Predicted class for a pair.
    pub fn predict(&self, pair: &ImagePair) -> Result<usize> {
        let mut tape = Tape::new();
        let out = self.forward_infer(&mut tape, pair)?;
        Ok(crate::backbone::argmax(tape.value(out.logits)))
    }

    /// Encoder side only: compact representation of the pair's distortion.
    pub fn encode_distortion(&self, pair: &ImagePair) -> Result<CompactRepresentation> {
        let (extractor, encoder, _) = self.cdre_parts()?;
        if !extractor.multi_scale {
            // single-scale ablation still encodes, via the graph path
            let mut tape = Tape::new();
            let orig = tape.constant(pair.original.clone());
            let comp = tape.constant(pair.compressed.clone());
            let f_o = extractor.forward(&mut tape, &self.store, orig)?;
            let f_c = extractor.forward(&mut tape, &self.store, comp)?;
            let out = encoder.forward(&mut tape, &self.store, orig, comp, &f_o, &f_c)?;
            return Ok(CompactRepresentation {
                latent: tape.value(out).clone(),
                source_h: pair.original.dim(1),
                source_w: pair.original.dim(2),
            });
        }
        let f_o = extractor.extract(&self.store, &pair.original)?;
        let f_c = extractor.extract(&self.store, &pair.compressed)?;
        encoder.encode(&self.store, pair, &f_o, &f_c)
    }

    /// Encoder side through quantization: the transmissible payload.
    pub fn encode_side_channel(&self, pair: &ImagePair) -> Result<BinaryRepresentation> {
        quantize(&self.encode_distortion(pair)?)
    }

    /// Decoder side: transformed features from received bits, as plain
    /// tensors.
    pub fn decode_side_channel(&self, bits: &BinaryRepresentation) -> Result<EmbeddingFeatureSet> {
        let embedding = self
            .embedding
            .as_ref()
            .ok_or_else(|| CdreError::MissingComponent("embedding".to_string()))?;
        let mut tape = Tape::new();
        let bnode = tape.constant(bits.as_tensor());
        let d0 = match self.cfg.backbone.family {
            BackboneFamily::Cnn => self
                .cnn_decoder
                .as_ref()
                .ok_or_else(|| CdreError::MissingComponent("cnn decoder".to_string()))?
                .forward(&mut tape, &self.store, bnode, bits.source_h, bits.source_w)?,
            BackboneFamily::Transformer => self
                .token_decoder
                .as_ref()
                .ok_or_else(|| CdreError::MissingComponent("token decoder".to_string()))?
                .forward(&mut tape, &self.store, bnode)?,
        };
        let chain = embedding.transform_chain(&mut tape, &self.store, d0, NUM_STAGES)?;
        let tensors: Vec<Tensor> = chain.iter().map(|&n| tape.value(n).clone()).collect();
        Ok(match self.cfg.backbone.family {
            BackboneFamily::Cnn => EmbeddingFeatureSet::Cnn(tensors),
            BackboneFamily::Transformer => EmbeddingFeatureSet::Tokens(tensors),
        })
    }
}

/// Nodes of one training forward pass.
pub struct TrainForward {
    pub loss: NodeId,
    pub task: NodeId,
    pub reg_terms: Vec<NodeId>,
    pub logits: NodeId,
    pub latent: Option<NodeId>,
}

/// Composite loss report.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub task: f64,
    /// Raw `(1 + cosine)` regularizer terms per scale, independent of λ.
    pub distortion_reg: Vec<f64>,
}

/// Composite loss over plain pyramids: `task + λ Σ (1 + cosine)`.
pub fn cdre_loss(
    task: f64,
    f_o: &FeaturePyramid,
    f_c: &FeaturePyramid,
    lambda: f64,
) -> Result<LossBreakdown> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(CdreError::InvalidArgument(
            "lambda must be finite and nonnegative".to_string(),
        ));
    }
    f_o.compatible(f_c)?;
    let mut distortion_reg = Vec::with_capacity(3);
    for (a, b) in f_o.levels.iter().zip(&f_c.levels) {
        let reg = 1.0 + mean_scale_cosine(a, b)?;
        distortion_reg.push(reg.clamp(0.0, 2.0));
    }
    let total = task + lambda * distortion_reg.iter().sum::<f64>();
    Ok(LossBreakdown {
        total,
        task,
        distortion_reg,
    })
}

/// Training regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Pretrain the downstream model alone on original frames.
    Backbone,
    /// Downstream model frozen; distortion pipeline trains.
    Fd,
    /// Everything trains jointly.
    Joint,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Backbone => "backbone",
            Self::Fd => "fd",
            Self::Joint => "joint",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(Self::Backbone),
            "fd" => Ok(Self::Fd),
            "joint" => Ok(Self::Joint),
            other => Err(CdreError::InvalidArgument(alloc::format!(
                "unknown regime `{other}`"
            ))),
        }
    }

    fn trains(self, group: ParamGroup) -> bool {
        let downstream = matches!(group, ParamGroup::Backbone | ParamGroup::Head);
        match self {
            Self::Backbone => downstream,
            Self::Fd => !downstream,
            Self::Joint => true,
        }
    }
}

/// Training-run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lambda: f64,
    pub steps: u64,
    pub lr: f64,
    pub backbone_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub train_qualities: Vec<u8>,
    pub train_n: usize,
    pub use_cosine_reg: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(CdreError::InvalidArgument(
                "lambda must be finite and nonnegative".to_string(),
            ));
        }
        if self.steps == 0 {
            return Err(CdreError::InvalidArgument("steps must be positive".to_string()));
        }
        if self.batch_size == 0 || self.train_n == 0 {
            return Err(CdreError::InvalidArgument(
                "batch size and dataset size must be positive".to_string(),
            ));
        }
        if self.train_qualities.is_empty() {
            return Err(CdreError::InvalidArgument(
                "at least one training quality is required".to_string(),
            ));
        }
        for &q in &self.train_qualities {
            CodecQuality::new(q)?;
        }
        Ok(())
    }

    fn effective_lambda(&self) -> f64 {
        if self.use_cosine_reg {
            self.lambda
        } else {
            0.0
        }
    }
}

/// Per-step mean loss record.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossBreakdown,
}

/// Copies parameter values between stores by name for the given groups
/// (used to start `fd`/`joint` runs from a pretrained baseline).
pub fn import_group_params(
    dst: &mut ParamStore,
    src: &ParamStore,
    groups: &[ParamGroup],
) -> Result<()> {
    let ids: Vec<ParamId> = dst.ids().collect();
    for id in ids {
        if !groups.contains(&dst.group(id)) {
            continue;
        }
        let name = dst.name(id).to_string();
        let sid = src
            .lookup(&name)
            .ok_or_else(|| CdreError::CheckpointMismatch(alloc::format!(
                "source checkpoint lacks parameter {name}"
            )))?;
        src.value(sid).same_shape(dst.value(id))?;
        *dst.value_mut(id) = src.value(sid).clone();
    }
    Ok(())
}

/// Runs `cfg.steps` optimization steps starting at absolute step
/// `start_step`. Deterministic: randomness is derived from
/// `(cfg.seed, step)` alone.
pub fn train(
    model: &mut CdreModel,
    opt: &mut Adam,
    cfg: &TrainConfig,
    start_step: u64,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    match cfg.regime {
        Regime::Backbone => {}
        Regime::Fd | Regime::Joint => {
            if !model.is_cdre() {
                return Err(CdreError::MissingComponent(
                    "distortion pipeline (extractor, codec, transformation, embedding)"
                        .to_string(),
                ));
            }
        }
    }
    model.store.set_trainable(|g| cfg.regime.trains(g));
    let lambda = cfg.effective_lambda();
    let data_seed = derive_seed(cfg.seed, "train-data");
    let lr_of = |g: ParamGroup| match g {
        ParamGroup::Backbone | ParamGroup::Head => cfg.backbone_lr,
        _ => cfg.lr,
    };

    let mut records = Vec::with_capacity(cfg.steps as usize);
    for step in start_step..start_step + cfg.steps {
        let mut rng = stream_rng(cfg.seed, "step", step);
        let q = CodecQuality::new(
            cfg.train_qualities[rng.random_range(0..cfg.train_qualities.len())],
        )?;
        let mut grad_acc: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        let mut mean = LossBreakdown {
            total: 0.0,
            task: 0.0,
            distortion_reg: Vec::new(),
        };
        for _ in 0..cfg.batch_size {
            let index = rng.random_range(0..cfg.train_n as u64);
            let sample = render_sample(data_seed, index);
            let original = sample.to_tensor();
            let pair = match cfg.regime {
                // backbone pretraining sees clean frames
                Regime::Backbone => ImagePair::new(original.clone(), original, 0.0)?,
                _ => compress_pair(&original, q)?,
            };
            let mut tape = Tape::new();
            let fwd = model.forward_train(&mut tape, &pair, sample.label, lambda)?;
            let grads = tape.backward(fwd.loss);
            for &(node, pid) in tape.param_bindings() {
                if !model.store.trainable(pid) {
                    continue;
                }
                if let Some(g) = grads.get(node) {
                    grad_acc
                        .entry(pid)
                        .or_insert_with(|| Tensor::zeros(g.shape()))
                        .axpy(1.0, g);
                }
            }
            mean.total += tape.value(fwd.loss).item();
            mean.task += tape.value(fwd.task).item();
            if mean.distortion_reg.len() < fwd.reg_terms.len() {
                mean.distortion_reg.resize(fwd.reg_terms.len(), 0.0);
            }
            for (acc, &t) in mean.distortion_reg.iter_mut().zip(&fwd.reg_terms) {
                *acc += tape.value(t).item();
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        for g in grad_acc.values_mut() {
            *g = g.map(|v| v * inv);
        }
        opt.step(&mut model.store, &grad_acc, lr_of);
        mean.total *= inv;
        mean.task *= inv;
        for r in &mut mean.distortion_reg {
            *r *= inv;
        }
        records.push(StepRecord { step, loss: mean });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg(regime: Regime, steps: u64, seed: u64) -> TrainConfig {
        TrainConfig {
            regime,
            lambda: 0.1,
            steps,
            lr: 1e-3,
            backbone_lr: 1e-4,
            batch_size: 2,
            seed,
            train_qualities: alloc::vec![10, 50, 90],
            train_n: 8,
            use_cosine_reg: true,
        }
    }

    fn seeded_pyramid(seed: u64) -> FeaturePyramid {
        let mut rng = crate::rng::stream_rng(seed, "pyr", 0);
        let mut level = |c: usize, h: usize, w: usize| {
            let data = (0..c * h * w).map(|_| rng.random::<f64>() - 0.5).collect();
            Tensor::new(&[c, h, w], data).unwrap()
        };
        FeaturePyramid {
            levels: [level(8, 4, 4), level(16, 2, 2), level(24, 1, 1)],
        }
    }

    #[test]
    fn loss_identity_case() {
        let p = seeded_pyramid(1);
        let out = cdre_loss(1.5, &p, &p, 0.5).unwrap();
        for r in &out.distortion_reg {
            assert!((r - 2.0).abs() < 1e-9);
        }
        assert!((out.total - (1.5 + 0.5 * 6.0)).abs() < 1e-9);
        assert_eq!(out.task, 1.5);
    }

    #[test]
    fn loss_orthogonal_case() {
        // per-location orthogonal features: reg = 1 at that scale
        let a = Tensor::new(&[2, 1, 2], alloc::vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(&[2, 1, 2], alloc::vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let p = FeaturePyramid {
            levels: [a.clone(), a.clone(), a],
        };
        let q = FeaturePyramid {
            levels: [b.clone(), b.clone(), b],
        };
        let out = cdre_loss(0.0, &p, &q, 1.0).unwrap();
        for r in &out.distortion_reg {
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_matches_scalar_oracle_per_lambda() {
        let p = seeded_pyramid(3);
        let q = seeded_pyramid(4);
        let task = 0.73;
        for lambda in [0.0, 0.1, 4.0] {
            let out = cdre_loss(task, &p, &q, lambda).unwrap();
            // independent loop oracle
            let mut regs = Vec::new();
            for (a, b) in p.levels.iter().zip(&q.levels) {
                let (c, h, w) = (a.dim(0), a.dim(1), a.dim(2));
                let mut total = 0.0;
                for pos in 0..h * w {
                    let mut dot = 0.0;
                    let mut na = 0.0;
                    let mut nb = 0.0;
                    for ci in 0..c {
                        let x = a.data()[ci * h * w + pos];
                        let y = b.data()[ci * h * w + pos];
                        dot += x * y;
                        na += x * x;
                        nb += y * y;
                    }
                    total += dot / (na.sqrt() * nb.sqrt()).max(1e-12);
                }
                regs.push(1.0 + total / (h * w) as f64);
            }
            let expect = task + lambda * regs.iter().sum::<f64>();
            assert!(
                (out.total - expect).abs() < 1e-6,
                "lambda {lambda}: {} vs {expect}",
                out.total
            );
            // reg report independent of lambda
            for (r, e) in out.distortion_reg.iter().zip(&regs) {
                assert!((r - e).abs() < 1e-6);
            }
            assert!(out.distortion_reg.iter().all(|r| (0.0..=2.0).contains(r)));
        }
    }

    #[test]
    fn loss_rejects_bad_lambda_and_shapes() {
        let p = seeded_pyramid(5);
        assert!(cdre_loss(0.0, &p, &p, -1.0).is_err());
        let mut q = seeded_pyramid(6);
        q.levels[0] = Tensor::zeros(&[8, 3, 3]);
        assert!(cdre_loss(0.0, &p, &q, 1.0).is_err());
    }

    #[test]
    fn fd_regime_freezes_downstream() {
        let mut model = CdreModel::new(ModelConfig::cdre(BackboneFamily::Cnn), 11).unwrap();
        let bb_before = model.store.group_hash(ParamGroup::Backbone);
        let head_before = model.store.group_hash(ParamGroup::Head);
        let enc_before = model.store.group_hash(ParamGroup::DistEnc);
        let mut opt = Adam::new(&model.store);
        train(&mut model, &mut opt, &tiny_cfg(Regime::Fd, 10, 21), 0).unwrap();
        assert_eq!(model.store.group_hash(ParamGroup::Backbone), bb_before);
        assert_eq!(model.store.group_hash(ParamGroup::Head), head_before);
        assert_ne!(model.store.group_hash(ParamGroup::DistEnc), enc_before);
    }

    #[test]
    fn joint_regime_updates_everything_and_loss_decreases_on_overfit_batch() {
        let mut model = CdreModel::new(ModelConfig::cdre(BackboneFamily::Cnn), 0).unwrap();
        let bb_before = model.store.group_hash(ParamGroup::Backbone);
        let mut opt = Adam::new(&model.store);
        let mut cfg = tiny_cfg(Regime::Joint, 10, 0);
        cfg.train_n = 2; // one small batch, revisited every step
        cfg.batch_size = 2;
        cfg.train_qualities = alloc::vec![50];
        let records = train(&mut model, &mut opt, &cfg, 0).unwrap();
        assert_ne!(model.store.group_hash(ParamGroup::Backbone), bb_before);
        assert!(
            records[9].loss.total < records[0].loss.total,
            "loss did not decrease: {} -> {}",
            records[0].loss.total,
            records[9].loss.total
        );
    }

    #[test]
    fn backbone_regime_needs_no_cdre_parts_but_fd_does() {
        let mut baseline = CdreModel::new(ModelConfig::baseline(BackboneFamily::Cnn), 3).unwrap();
        let mut opt = Adam::new(&baseline.store);
        train(&mut baseline, &mut opt, &tiny_cfg(Regime::Backbone, 2, 5), 0).unwrap();

        let err = train(&mut baseline, &mut opt, &tiny_cfg(Regime::Fd, 1, 5), 0).unwrap_err();
        match err {
            CdreError::MissingComponent(parts) => {
                assert!(parts.contains("extractor") || parts.contains("distortion"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut model = CdreModel::new(ModelConfig::cdre(BackboneFamily::Cnn), 7).unwrap();
            let mut opt = Adam::new(&model.store);
            let records = train(&mut model, &mut opt, &tiny_cfg(Regime::Fd, 3, 9), 0).unwrap();
            (
                model.store.group_hash(ParamGroup::DistEnc),
                records.last().unwrap().loss.total,
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradient_reaches_encoder_through_quantizer() {
        let mut model = CdreModel::new(ModelConfig::cdre(BackboneFamily::Cnn), 13).unwrap();
        // The zero-initialized embedding projections intentionally gate the
        // branch off at init; give them mid-training values so the test
        // exercises the architecture, not the initialization.
        let ids: Vec<ParamId> = model.store.ids().collect();
        let mut rng = crate::rng::stream_rng(13, "perturb", 0);
        for id in ids {
            if model.store.name(id).starts_with("embed.") && model.store.name(id).contains(".out.") {
                let shape = model.store.value(id).shape().to_vec();
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
                *model.store.value_mut(id) = Tensor::new(&shape, data).unwrap();
            }
        }
        let sample = render_sample(1, 0);
        let original = sample.to_tensor();
        let pair = compress_pair(&original, CodecQuality::new(30).unwrap()).unwrap();
        let mut tape = Tape::new();
        let fwd = model
            .forward_train(&mut tape, &pair, sample.label, 0.0)
            .unwrap();
        let grads = tape.backward(fwd.loss);
        let first = model.store.lookup("dist_enc.block1.conv.weight").unwrap();
        let mut norm = 0.0;
        for &(node, pid) in tape.param_bindings() {
            if pid == first {
                if let Some(g) = grads.get(node) {
                    norm += g.sq_norm();
                }
            }
        }
        assert!(norm > 0.0, "no gradient reached the first encoder layer");
    }

    #[test]
    fn lambda_changes_total_but_not_reg_report() {
        let model = CdreModel::new(ModelConfig::cdre(BackboneFamily::Cnn), 17).unwrap();
        let sample = render_sample(2, 3);
        let original = sample.to_tensor();
        let pair = compress_pair(&original, CodecQuality::new(20).unwrap()).unwrap();
        let collect = |lambda: f64| {
            let mut tape = Tape::new();
            let fwd = model
                .forward_train(&mut tape, &pair, sample.label, lambda)
                .unwrap();
            let regs: Vec<f64> = fwd
                .reg_terms
                .iter()
                .map(|&t| tape.value(t).item())
                .collect();
            (tape.value(fwd.loss).item(), tape.value(fwd.task).item(), regs)
        };
        let (t0, task0, r0) = collect(0.0);
        let (t1, task1, r1) = collect(0.1);
        let (t4, _, r4) = collect(4.0);
        assert_eq!(r0, r1);
        assert_eq!(r0, r4);
        assert_eq!(task0, task1);
        assert_eq!(t0, task0);
        let sum: f64 = r0.iter().sum();
        assert!((t1 - (task0 + 0.1 * sum)).abs() < 1e-9);
        assert!((t4 - (task0 + 4.0 * sum)).abs() < 1e-9);
    }

    #[test]
    fn import_copies_downstream_groups() {
        let baseline = CdreModel::new(ModelConfig::baseline(BackboneFamily::Cnn), 19).unwrap();
        let mut cdre = CdreModel::new(ModelConfig::cdre(BackboneFamily::Cnn), 23).unwrap();
        assert_ne!(
            cdre.store.group_hash(ParamGroup::Backbone),
            baseline.store.group_hash(ParamGroup::Backbone)
        );
        import_group_params(
            &mut cdre.store,
            &baseline.store,
            &[ParamGroup::Backbone, ParamGroup::Head],
        )
        .unwrap();
        assert_eq!(
            cdre.store.group_hash(ParamGroup::Backbone),
            baseline.store.group_hash(ParamGroup::Backbone)
        );
        assert_eq!(
            cdre.store.group_hash(ParamGroup::Head),
            baseline.store.group_hash(ParamGroup::Head)
        );
    }
}

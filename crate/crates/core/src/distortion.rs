//! Lightweight distortion codec.
//!
//! The encoder concatenates the original and compressed frames, squeezes
//! them through five stride-2 blocks under linear modulation by the
//! extractor features, and emits a low-resolution latent. The latent is
//! binarized by a sigmoid-round quantizer (straight-through gradients)
//! and packed into the `CDRD` side-channel bitstream. Two decoders
//! reconstruct the transmitted bits for downstream consumption: a
//! convolutional one restoring full spatial resolution and a token one
//! for transformer backbones.
//!
//! `CDRD` layout (big-endian): magic (4), version `u8 = 1`, source_h
//! `u16`, source_w `u16`, channels `u8`, latent_h `u16`, latent_w `u16`;
//! payload bit-packed channel-major, row-major, MSB first, zero-padded
//! to a byte boundary.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{shape_mismatch, CdreError, Result};
use crate::extractor::{FeaturePyramid, EXTRACTOR_CHANNELS, LEAKY_SLOPE};
use crate::graph::{NodeId, Tape};
use crate::nn::{Conv2d, Init, LayerCost, Linear, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Channel count of the compact representation picked by the channel
/// ablation; the sweep covers {1, 3, 6, 10, 16}.
pub const DEFAULT_LATENT_CHANNELS: usize = 6;
/// Output channels of the convolutional distortion decoder.
pub const DECODED_CHANNELS: usize = 8;
/// Total spatial reduction of the distortion encoder.
pub const DOWNSAMPLE: usize = 32;

/// Widths of the five stride-2 compression blocks.
const ENC_WIDTHS: [usize; 5] = [8, 12, 16, 16, 16];
/// Mirrored widths of the five upsampling blocks.
const DEC_WIDTHS: [usize; 5] = [16, 16, 16, 12, DECODED_CHANNELS];
/// Hidden width of the token decoder's two-layer projection.
const TOKEN_HIDDEN: usize = 32;

const MAGIC: &[u8; 4] = b"CDRD";
const FORMAT_VERSION: u8 = 1;
/// 4 magic + 1 version + 2 source_h + 2 source_w + 1 channels + 2 latent_h + 2 latent_w.
pub const SIDE_HEADER_BYTES: usize = 14;

/// How extractor features condition the distortion encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// Linear modulation `α ⊙ F + β` (the default).
    Modulation,
    /// Channel concatenation of the features into the next block.
    Concat,
    /// No conditioning (ablation baseline).
    None,
}

impl Conditioning {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Modulation => "modulation",
            Self::Concat => "concat",
            Self::None => "none",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "modulation" => Ok(Self::Modulation),
            "concat" => Ok(Self::Concat),
            "none" => Ok(Self::None),
            other => Err(CdreError::InvalidArgument(format!(
                "unknown conditioning `{other}`"
            ))),
        }
    }
}

/// Real-valued latent before quantization.
#[derive(Clone, Debug)]
pub struct CompactRepresentation {
    pub latent: Tensor,
    pub source_h: usize,
    pub source_w: usize,
}

/// Quantized side-channel payload; entries are exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryRepresentation {
    pub channels: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub source_h: usize,
    pub source_w: usize,
    bits: Vec<u8>,
}

impl BinaryRepresentation {
    pub fn new(
        channels: usize,
        latent_h: usize,
        latent_w: usize,
        source_h: usize,
        source_w: usize,
        bits: Vec<u8>,
    ) -> Result<Self> {
        if bits.len() != channels * latent_h * latent_w {
            return Err(CdreError::InvalidArgument(format!(
                "bit count {} does not match {channels}x{latent_h}x{latent_w}",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(CdreError::InvalidArgument(
                "binary representation entries must be 0 or 1".to_string(),
            ));
        }
        Ok(Self {
            channels,
            latent_h,
            latent_w,
            source_h,
            source_w,
            bits,
        })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn num_bits(&self) -> usize {
        self.bits.len()
    }

    /// Bits as a `[C, h, w]` tensor of 0.0 / 1.0 for the decoders.
    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.channels, self.latent_h, self.latent_w],
            self.bits.iter().map(|&b| b as f64).collect(),
        )
        .unwrap()
    }
}

/// Latent grid dimensions for a source of the given size.
pub fn latent_dims(source_h: usize, source_w: usize) -> (usize, usize) {
    (source_h.div_ceil(DOWNSAMPLE), source_w.div_ceil(DOWNSAMPLE))
}

/// Elementwise linear modulation `α ⊙ f + β` on plain tensors.
pub fn modulate(f: &Tensor, alpha: &Tensor, beta: &Tensor) -> Result<Tensor> {
    f.same_shape(alpha)?;
    f.same_shape(beta)?;
    let data = f
        .data()
        .iter()
        .zip(alpha.data())
        .zip(beta.data())
        .map(|((x, a), b)| a * x + b)
        .collect();
    Tensor::new(f.shape(), data)
}

/// Compresses the pair plus feature evidence into the compact latent.
pub struct DistortionEncoder {
    blocks: [Conv2d; 5],
    head: Conv2d,
    /// `(alpha, beta)` 1×1 convs per conditioned scale.
    mod_convs: Vec<(Conv2d, Conv2d)>,
    pub conditioning: Conditioning,
    pub latent_channels: usize,
    /// Scales (1-based block index) that receive conditioning.
    conditioned_scales: usize,
}

impl DistortionEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        latent_channels: usize,
        conditioning: Conditioning,
        multi_scale: bool,
    ) -> Self {
        let conditioned_scales = if multi_scale { 3 } else { 1 };
        let mut in_c = 6usize;
        let mut blocks = Vec::with_capacity(5);
        for (i, &out_c) in ENC_WIDTHS.iter().enumerate() {
            // With concat conditioning the features widen the next block.
            let extra = if conditioning == Conditioning::Concat && (1..=conditioned_scales).contains(&i)
            {
                2 * EXTRACTOR_CHANNELS[i - 1]
            } else {
                0
            };
            blocks.push(Conv2d::new(
                store,
                rng,
                &format!("dist_enc.block{}.conv", i + 1),
                ParamGroup::DistEnc,
                in_c + extra,
                out_c,
                3,
                2,
                1,
                true,
                Init::KaimingUniform,
            ));
            in_c = out_c;
        }
        let head = Conv2d::new(
            store,
            rng,
            "dist_enc.head.conv",
            ParamGroup::DistEnc,
            ENC_WIDTHS[4],
            latent_channels,
            1,
            1,
            0,
            true,
            Init::KaimingUniform,
        );

        let mut mod_convs = Vec::new();
        if conditioning == Conditioning::Modulation {
            for scale in 0..conditioned_scales {
                let feat_c = 2 * EXTRACTOR_CHANNELS[scale];
                let width = ENC_WIDTHS[scale];
                // Zero weights with bias (1, 0) make modulation start as
                // the identity.
                let alpha = Conv2d::new(
                    store,
                    rng,
                    &format!("modulation.scale{}.alpha", scale + 1),
                    ParamGroup::Modulation,
                    feat_c,
                    width,
                    1,
                    1,
                    0,
                    true,
                    Init::Zeros,
                );
                if let Some(b) = alpha.b {
                    *store.value_mut(b) = Tensor::full(&[width], 1.0);
                }
                let beta = Conv2d::new(
                    store,
                    rng,
                    &format!("modulation.scale{}.beta", scale + 1),
                    ParamGroup::Modulation,
                    feat_c,
                    width,
                    1,
                    1,
                    0,
                    true,
                    Init::Zeros,
                );
                mod_convs.push((alpha, beta));
            }
        }

        Self {
            blocks: blocks.try_into().ok().unwrap(),
            head,
            mod_convs,
            conditioning,
            latent_channels,
            conditioned_scales,
        }
    }

    /// Builds the encoding graph. `f_o` / `f_c` are per-scale extractor
    /// feature nodes for the original and compressed image.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        original: NodeId,
        compressed: NodeId,
        f_o: &[NodeId],
        f_c: &[NodeId],
    ) -> Result<NodeId> {
        tape.value(original).same_shape(tape.value(compressed))?;
        if f_o.len() < self.conditioned_scales || f_c.len() < self.conditioned_scales {
            return Err(CdreError::MissingComponent(
                "extractor features for every conditioned scale".to_string(),
            ));
        }
        let mut x = tape.concat_channels(original, compressed)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, store, x)?;
            x = tape.leaky_relu(x, LEAKY_SLOPE);
            if i < self.conditioned_scales {
                x = self.condition(tape, store, x, f_o[i], f_c[i], i)?;
            }
        }
        self.head.forward(tape, store, x)
    }

    fn condition(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        f_o: NodeId,
        f_c: NodeId,
        scale: usize,
    ) -> Result<NodeId> {
        // Feature maps must sit on the same grid as the block output.
        let xs = tape.value(x).shape().to_vec();
        let fs = tape.value(f_o).shape().to_vec();
        if xs[1..] != fs[1..] {
            return Err(shape_mismatch(&xs, &fs));
        }
        match self.conditioning {
            Conditioning::None => Ok(x),
            Conditioning::Concat => {
                let feats = tape.concat_channels(f_o, f_c)?;
                tape.concat_channels(x, feats)
            }
            Conditioning::Modulation => {
                let feats = tape.concat_channels(f_o, f_c)?;
                let (alpha_conv, beta_conv) = &self.mod_convs[scale];
                let alpha = alpha_conv.forward(tape, store, feats)?;
                let beta = beta_conv.forward(tape, store, feats)?;
                let scaled = tape.mul(alpha, x)?;
                tape.add(scaled, beta)
            }
        }
    }

    /// Inference convenience over plain tensors.
    pub fn encode(
        &self,
        store: &ParamStore,
        pair: &crate::codec::ImagePair,
        f_o: &FeaturePyramid,
        f_c: &FeaturePyramid,
    ) -> Result<CompactRepresentation> {
        let mut tape = Tape::new();
        let orig = tape.constant(pair.original.clone());
        let comp = tape.constant(pair.compressed.clone());
        let fo: Vec<NodeId> = f_o.levels.iter().map(|t| tape.constant(t.clone())).collect();
        let fc: Vec<NodeId> = f_c.levels.iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.forward(&mut tape, store, orig, comp, &fo, &fc)?;
        Ok(CompactRepresentation {
            latent: tape.value(out).clone(),
            source_h: pair.original.dim(1),
            source_w: pair.original.dim(2),
        })
    }

    pub fn costs(&self, h: usize, w: usize) -> Vec<LayerCost> {
        let mut out = Vec::new();
        let (mut ch, mut cw) = (h, w);
        for (i, block) in self.blocks.iter().enumerate() {
            out.push(LayerCost {
                name: format!("dist_enc.block{}", i + 1),
                group: ParamGroup::DistEnc,
                params: block.param_count(),
                macs: block.macs(ch, cw),
            });
            (ch, cw) = block.out_dims(ch, cw);
            if i < self.conditioned_scales {
                for (name, conv) in self.mod_convs.get(i).iter().flat_map(|(a, b)| {
                    [("alpha", a), ("beta", b)]
                }) {
                    out.push(LayerCost {
                        name: format!("modulation.scale{}.{name}", i + 1),
                        group: ParamGroup::Modulation,
                        params: conv.param_count(),
                        macs: conv.macs(ch, cw),
                    });
                }
            }
        }
        out.push(LayerCost {
            name: "dist_enc.head".to_string(),
            group: ParamGroup::DistEnc,
            params: self.head.param_count(),
            macs: self.head.macs(ch, cw),
        });
        out
    }
}

/// Binarizes the latent; ties at `sigmoid = 0.5` round to 1.
pub fn quantize(y: &CompactRepresentation) -> Result<BinaryRepresentation> {
    if !y.latent.is_all_finite() {
        return Err(CdreError::NonFinite("compact representation".to_string()));
    }
    if y.latent.rank() != 3 {
        return Err(CdreError::InvalidArgument(
            "latent must be [C, h, w]".to_string(),
        ));
    }
    let bits = y
        .latent
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { 1u8 } else { 0u8 })
        .collect();
    BinaryRepresentation::new(
        y.latent.dim(0),
        y.latent.dim(1),
        y.latent.dim(2),
        y.source_h,
        y.source_w,
        bits,
    )
}

/// Packs a binary representation into the `CDRD` wire format.
pub fn serialize(b: &BinaryRepresentation) -> Vec<u8> {
    let payload_len = b.num_bits().div_ceil(8);
    let mut out = Vec::with_capacity(SIDE_HEADER_BYTES + payload_len);
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(b.source_h as u16).to_be_bytes());
    out.extend_from_slice(&(b.source_w as u16).to_be_bytes());
    out.push(b.channels as u8);
    out.extend_from_slice(&(b.latent_h as u16).to_be_bytes());
    out.extend_from_slice(&(b.latent_w as u16).to_be_bytes());
    let mut cur = 0u8;
    let mut used = 0;
    for &bit in b.bits() {
        cur |= bit << (7 - used);
        used += 1;
        if used == 8 {
            out.push(cur);
            cur = 0;
            used = 0;
        }
    }
    if used > 0 {
        out.push(cur);
    }
    out
}

/// Exact inverse of [`serialize`].
pub fn deserialize(bytes: &[u8]) -> Result<BinaryRepresentation> {
    let malformed = |offset: usize, reason: &str| CdreError::MalformedBitstream {
        offset,
        reason: format!("malformed distortion bitstream: {reason}"),
    };
    if bytes.len() < SIDE_HEADER_BYTES {
        return Err(malformed(bytes.len(), "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(malformed(0, "bad magic"));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(malformed(4, "unsupported version"));
    }
    let source_h = u16::from_be_bytes([bytes[5], bytes[6]]) as usize;
    let source_w = u16::from_be_bytes([bytes[7], bytes[8]]) as usize;
    let channels = bytes[9] as usize;
    let latent_h = u16::from_be_bytes([bytes[10], bytes[11]]) as usize;
    let latent_w = u16::from_be_bytes([bytes[12], bytes[13]]) as usize;
    let nbits = channels * latent_h * latent_w;
    let payload_len = nbits.div_ceil(8);
    let expected = SIDE_HEADER_BYTES + payload_len;
    if bytes.len() < expected {
        return Err(malformed(bytes.len(), "truncated payload"));
    }
    if bytes.len() > expected {
        return Err(malformed(expected, "trailing bytes"));
    }
    let mut bits = Vec::with_capacity(nbits);
    for i in 0..nbits {
        let byte = bytes[SIDE_HEADER_BYTES + i / 8];
        bits.push((byte >> (7 - (i % 8))) & 1);
    }
    // padding bits must be zero
    if nbits % 8 != 0 {
        let last = bytes[expected - 1];
        let mask = (1u8 << (8 - nbits % 8)) - 1;
        if last & mask != 0 {
            return Err(malformed(expected - 1, "nonzero padding bits"));
        }
    }
    BinaryRepresentation::new(channels, latent_h, latent_w, source_h, source_w, bits)
}

/// Payload bits per source pixel (header excluded; it is reported once
/// per sequence by the callers that care).
pub fn side_bpp(b: &BinaryRepresentation) -> Result<f64> {
    if b.source_h * b.source_w == 0 {
        return Err(CdreError::InvalidArgument(
            "side_bpp requires nonzero source dimensions".to_string(),
        ));
    }
    Ok(b.num_bits() as f64 / (b.source_h * b.source_w) as f64)
}

/// Decoded distortion feature, tagged by the backbone family it feeds.
#[derive(Clone, Debug)]
pub enum DecodedDistortionFeature {
    /// `[C_d, source_h, source_w]` spatial feature for CNN backbones.
    Spatial(Tensor),
    /// `[N_tok, token_dim]` tokens for transformer backbones.
    Tokens(Tensor),
}

/// Convolutional decoder: five upsample + conv blocks back to source
/// resolution.
pub struct CnnDecoder {
    blocks: [Conv2d; 5],
}

impl CnnDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, latent_channels: usize) -> Self {
        let mut in_c = latent_channels;
        let mut blocks = Vec::with_capacity(5);
        for (i, &out_c) in DEC_WIDTHS.iter().enumerate() {
            blocks.push(Conv2d::new(
                store,
                rng,
                &format!("dist_dec.block{}.conv", i + 1),
                ParamGroup::DistDec,
                in_c,
                out_c,
                3,
                1,
                1,
                true,
                Init::KaimingUniform,
            ));
            in_c = out_c;
        }
        Self {
            blocks: blocks.try_into().ok().unwrap(),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bits: NodeId,
        source_h: usize,
        source_w: usize,
    ) -> Result<NodeId> {
        let mut x = bits;
        for (i, block) in self.blocks.iter().enumerate() {
            x = tape.upsample_nearest_2x(x)?;
            x = block.forward(tape, store, x)?;
            if i + 1 < self.blocks.len() {
                x = tape.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        tape.crop_hw(x, source_h, source_w)
    }

    pub fn decode(&self, store: &ParamStore, b: &BinaryRepresentation) -> Result<DecodedDistortionFeature> {
        let mut tape = Tape::new();
        let bits = tape.constant(b.as_tensor());
        let out = self.forward(&mut tape, store, bits, b.source_h, b.source_w)?;
        Ok(DecodedDistortionFeature::Spatial(tape.value(out).clone()))
    }

    pub fn costs(&self, source_h: usize, source_w: usize) -> Vec<LayerCost> {
        let (lh, lw) = latent_dims(source_h, source_w);
        let mut dims = (lh, lw);
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            dims = (dims.0 * 2, dims.1 * 2);
            out.push(LayerCost {
                name: format!("dist_dec.block{}", i + 1),
                group: ParamGroup::DistDec,
                params: block.param_count(),
                macs: block.macs(dims.0, dims.1),
            });
        }
        out
    }
}

/// Token decoder: flattens latent positions and projects channels to the
/// backbone token width with a two-layer pointwise map.
pub struct TokenDecoder {
    l1: Linear,
    l2: Linear,
    pub token_dim: usize,
}

impl TokenDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        latent_channels: usize,
        token_dim: usize,
    ) -> Self {
        let l1 = Linear::new(
            store,
            rng,
            "dist_dec.proj1",
            ParamGroup::DistDec,
            latent_channels,
            TOKEN_HIDDEN,
            true,
            Init::KaimingUniform,
        );
        let l2 = Linear::new(
            store,
            rng,
            "dist_dec.proj2",
            ParamGroup::DistDec,
            TOKEN_HIDDEN,
            token_dim,
            true,
            Init::KaimingUniform,
        );
        Self { l1, l2, token_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, bits: NodeId) -> Result<NodeId> {
        let tokens = tape.grid_to_tokens(bits)?;
        let hidden = self.l1.forward(tape, store, tokens)?;
        let hidden = tape.relu(hidden);
        self.l2.forward(tape, store, hidden)
    }

    pub fn decode(&self, store: &ParamStore, b: &BinaryRepresentation) -> Result<DecodedDistortionFeature> {
        let mut tape = Tape::new();
        let bits = tape.constant(b.as_tensor());
        let out = self.forward(&mut tape, store, bits)?;
        Ok(DecodedDistortionFeature::Tokens(tape.value(out).clone()))
    }

    pub fn costs(&self, source_h: usize, source_w: usize) -> Vec<LayerCost> {
        let (lh, lw) = latent_dims(source_h, source_w);
        let tokens = lh * lw;
        alloc::vec![
            LayerCost {
                name: "dist_dec.proj1".to_string(),
                group: ParamGroup::DistDec,
                params: self.l1.param_count(),
                macs: self.l1.macs(tokens),
            },
            LayerCost {
                name: "dist_dec.proj2".to_string(),
                group: ParamGroup::DistDec,
                params: self.l2.param_count(),
                macs: self.l2.macs(tokens),
            },
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ImagePair;
    use crate::extractor::SensitiveExtractor;
    use rand::Rng;

    fn setup(latent_channels: usize, conditioning: Conditioning) -> (ParamStore, SensitiveExtractor, DistortionEncoder) {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(77, "init", 0);
        let ex = SensitiveExtractor::new(&mut store, &mut rng, true);
        let enc = DistortionEncoder::new(&mut store, &mut rng, latent_channels, conditioning, true);
        (store, ex, enc)
    }

    fn seeded_pair(seed: u64, h: usize, w: usize) -> ImagePair {
        let mut rng = crate::rng::stream_rng(seed, "pair", 0);
        let orig: Vec<f64> = (0..3 * h * w).map(|_| rng.random()).collect();
        let comp: Vec<f64> = orig.iter().map(|v| (v + 0.01).min(1.0)).collect();
        ImagePair::new(
            Tensor::new(&[3, h, w], orig).unwrap(),
            Tensor::new(&[3, h, w], comp).unwrap(),
            0.4,
        )
        .unwrap()
    }

    fn encode_pair(
        store: &ParamStore,
        ex: &SensitiveExtractor,
        enc: &DistortionEncoder,
        pair: &ImagePair,
    ) -> CompactRepresentation {
        let fo = ex.extract(store, &pair.original).unwrap();
        let fc = ex.extract(store, &pair.compressed).unwrap();
        enc.encode(store, pair, &fo, &fc).unwrap()
    }

    #[test]
    fn latent_shape_64() {
        let (store, ex, enc) = setup(6, Conditioning::Modulation);
        let pair = seeded_pair(1, 64, 64);
        let y = encode_pair(&store, &ex, &enc, &pair);
        assert_eq!(y.latent.shape(), &[6, 2, 2]);
        assert_eq!((y.source_h, y.source_w), (64, 64));
    }

    #[test]
    fn latent_shape_720p() {
        let (store, ex, enc) = setup(6, Conditioning::Modulation);
        let pair = seeded_pair(2, 720, 1280);
        let y = encode_pair(&store, &ex, &enc, &pair);
        assert_eq!(y.latent.shape(), &[6, 23, 40]);
        assert_eq!(latent_dims(720, 1280), (23, 40));
    }

    #[test]
    fn default_modulation_is_identity() {
        let (store, ex, mut enc) = setup(6, Conditioning::Modulation);
        let pair = seeded_pair(3, 64, 48);
        let modulated = encode_pair(&store, &ex, &enc, &pair);
        enc.conditioning = Conditioning::None;
        let plain = encode_pair(&store, &ex, &enc, &pair);
        assert_eq!(modulated.latent, plain.latent);
    }

    #[test]
    fn modulate_identity_and_oracle() {
        let mut rng = crate::rng::stream_rng(8, "mod", 0);
        let f = Tensor::new(&[2, 3, 3], (0..18).map(|_| rng.random::<f64>()).collect()).unwrap();
        let ones = Tensor::full(&[2, 3, 3], 1.0);
        let zeros = Tensor::zeros(&[2, 3, 3]);
        assert_eq!(modulate(&f, &ones, &zeros).unwrap(), f);

        let b = Tensor::full(&[2, 3, 3], 0.25);
        assert_eq!(modulate(&f, &zeros, &b).unwrap(), b);

        let alpha = Tensor::new(&[2, 3, 3], (0..18).map(|_| rng.random::<f64>()).collect()).unwrap();
        let beta = Tensor::new(&[2, 3, 3], (0..18).map(|_| rng.random::<f64>()).collect()).unwrap();
        let got = modulate(&f, &alpha, &beta).unwrap();
        for i in 0..18 {
            assert_eq!(
                got.data()[i],
                alpha.data()[i] * f.data()[i] + beta.data()[i]
            );
        }

        let bad = Tensor::zeros(&[2, 3, 4]);
        assert!(modulate(&f, &bad, &beta).is_err());
    }

    #[test]
    fn quantizer_thresholds() {
        let y = CompactRepresentation {
            latent: Tensor::new(&[1, 1, 3], alloc::vec![0.0, -3.0, 2.0]).unwrap(),
            source_h: 32,
            source_w: 32,
        };
        let b = quantize(&y).unwrap();
        assert_eq!(b.bits(), &[1, 0, 1]);
    }

    #[test]
    fn quantizer_rejects_non_finite() {
        let y = CompactRepresentation {
            latent: Tensor::new(&[1, 1, 1], alloc::vec![f64::NAN]).unwrap(),
            source_h: 8,
            source_w: 8,
        };
        assert!(matches!(quantize(&y), Err(CdreError::NonFinite(_))));
    }

    fn seeded_bits(seed: u64, c: usize, h: usize, w: usize, sh: usize, sw: usize) -> BinaryRepresentation {
        let mut rng = crate::rng::stream_rng(seed, "bits", 0);
        let bits = (0..c * h * w).map(|_| rng.random_range(0..=1u8)).collect();
        BinaryRepresentation::new(c, h, w, sh, sw, bits).unwrap()
    }

    #[test]
    fn serialized_sizes() {
        let b = seeded_bits(1, 6, 23, 40, 720, 1280);
        let bytes = serialize(&b);
        assert_eq!(bytes.len(), SIDE_HEADER_BYTES + 690);

        let z = BinaryRepresentation::new(1, 1, 8, 32, 32, alloc::vec![0; 8]).unwrap();
        let zb = serialize(&z);
        assert_eq!(&zb[SIDE_HEADER_BYTES..], &[0u8]);
    }

    #[test]
    fn roundtrip_seeded() {
        for seed in 0..100 {
            let mut rng = crate::rng::stream_rng(seed, "dims", 0);
            let c = rng.random_range(1..=16);
            let h = rng.random_range(1..=24);
            let w = rng.random_range(1..=24);
            let b = seeded_bits(seed, c, h, w, h * 32, w * 32);
            assert_eq!(deserialize(&serialize(&b)).unwrap(), b);
        }
    }

    #[test]
    fn deserialize_rejects_corruption() {
        let b = seeded_bits(5, 3, 4, 4, 128, 128);
        let good = serialize(&b);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'Z';
        assert!(matches!(
            deserialize(&bad_magic),
            Err(CdreError::MalformedBitstream { offset: 0, .. })
        ));

        let mut truncated = good.clone();
        truncated.pop();
        assert!(matches!(
            deserialize(&truncated),
            Err(CdreError::MalformedBitstream { .. })
        ));

        let mut trailing = good;
        trailing.push(0);
        assert!(matches!(
            deserialize(&trailing),
            Err(CdreError::MalformedBitstream { .. })
        ));
    }

    #[test]
    fn side_bpp_values() {
        let b = seeded_bits(6, 6, 23, 40, 720, 1280);
        let v = side_bpp(&b).unwrap();
        assert!((v - 5520.0 / 921_600.0).abs() < 1e-12);
        // ≈ 20.7 KB/s at 30 fps for 720p
        let kbps = v * 1280.0 * 720.0 * 30.0 / 8.0 / 1000.0;
        assert!((kbps - 20.7).abs() < 0.1, "got {kbps}");

        let one = BinaryRepresentation::new(1, 1, 1, 32, 32, alloc::vec![1]).unwrap();
        assert_eq!(side_bpp(&one).unwrap(), 1.0 / 1024.0);

        let single = seeded_bits(7, 3, 5, 5, 160, 160);
        let double = seeded_bits(7, 6, 5, 5, 160, 160);
        assert_eq!(
            2.0 * side_bpp(&single).unwrap(),
            side_bpp(&double).unwrap()
        );
    }

    #[test]
    fn cnn_decoder_shapes_and_determinism() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(9, "init", 0);
        let dec = CnnDecoder::new(&mut store, &mut rng, 6);
        let b = seeded_bits(10, 6, 2, 2, 64, 64);
        let DecodedDistortionFeature::Spatial(f) = dec.decode(&store, &b).unwrap() else {
            panic!("expected spatial feature");
        };
        assert_eq!(f.shape(), &[8, 64, 64]);
        let DecodedDistortionFeature::Spatial(f2) = dec.decode(&store, &b).unwrap() else {
            panic!();
        };
        assert_eq!(f, f2);

        // non-multiple-of-32 source dims are cropped to true size
        let b = seeded_bits(11, 6, 2, 2, 50, 41);
        let DecodedDistortionFeature::Spatial(f) = dec.decode(&store, &b).unwrap() else {
            panic!();
        };
        assert_eq!(f.shape(), &[8, 50, 41]);
    }

    #[test]
    fn token_decoder_shapes_and_constancy() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(12, "init", 0);
        let dec = TokenDecoder::new(&mut store, &mut rng, 6, 24);
        let b = seeded_bits(13, 6, 2, 2, 64, 64);
        let DecodedDistortionFeature::Tokens(t) = dec.decode(&store, &b).unwrap() else {
            panic!("expected tokens");
        };
        assert_eq!(t.shape(), &[4, 24]);

        let zeros = BinaryRepresentation::new(6, 2, 2, 64, 64, alloc::vec![0; 24]).unwrap();
        let DecodedDistortionFeature::Tokens(t) = dec.decode(&store, &zeros).unwrap() else {
            panic!();
        };
        let first: Vec<f64> = t.data()[0..24].to_vec();
        for row in 1..4 {
            assert_eq!(&t.data()[row * 24..(row + 1) * 24], &first[..]);
        }
    }

    #[test]
    fn encoder_side_budget() {
        let (store, _, enc) = setup(6, Conditioning::Modulation);
        let encoder_params: usize = [ParamGroup::Extractor, ParamGroup::Modulation, ParamGroup::DistEnc]
            .iter()
            .map(|&g| store.count_scalars(g))
            .sum();
        assert!(
            encoder_params <= 20_000,
            "encoder side has {encoder_params} params"
        );
        // MACs per pixel at 720p, counting both siamese extractor passes.
        let mut macs: u64 = enc.costs(720, 1280).iter().map(|c| c.macs).sum();
        let ex_cost: u64 = {
            // extractor runs twice (original + compressed)
            let dims = [(720usize, 1280usize), (360, 640), (180, 320)];
            let widths = [(3usize, 8usize), (8, 16), (16, 24)];
            2 * dims
                .iter()
                .zip(widths)
                .map(|(&(h, w), (i, o))| (i * o * 9) as u64 * (h.div_ceil(2) * w.div_ceil(2)) as u64)
                .sum::<u64>()
        };
        macs += ex_cost;
        let per_pixel = macs as f64 / (720.0 * 1280.0);
        assert!(
            (400.0..=1500.0).contains(&per_pixel),
            "encoder side at {per_pixel} MACs/pixel"
        );
    }
}

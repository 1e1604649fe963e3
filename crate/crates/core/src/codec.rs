//! Block-DCT surrogate base codec.
//!
//! Stands in for the external image/video codecs whose reconstructions
//! the pipeline consumes. It is not meant to match any standard: the
//! goals are a deterministic bitstream, monotone rate/distortion in the
//! quality knob, and arithmetic simple enough to verify against a
//! directly scripted reference.
//!
//! Bitstream layout (big-endian): magic `CDRB`, version `u8 = 1`,
//! height `u16`, width `u16`, quality `u8`, then per-channel 8×8 block
//! payload: zig-zag scanned quantized coefficients, run-length coded
//! zeros with signed exponential-Golomb levels.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::bitio::{BitReader, BitWriter};
use crate::error::{CdreError, Result};
use crate::tensor::Tensor;

/// Orthonormal 8-point DCT-II basis, `DCT_BASIS[k][n]`.
///
/// Hardcoded so the coefficient path is bit-identical on every platform
/// (library `cos` implementations differ in the last ulp).
const DCT_BASIS: [[f64; 8]; 8] = [
    [0.3535533905932738, 0.3535533905932738, 0.3535533905932738, 0.3535533905932738, 0.3535533905932738, 0.3535533905932738, 0.3535533905932738, 0.3535533905932738],
    [0.4903926402016152, 0.4157348061512726, 0.27778511650980114, 0.09754516100806417, -0.0975451610080641, -0.277785116509801, -0.4157348061512727, -0.4903926402016152],
    [0.46193976625564337, 0.19134171618254492, -0.19134171618254486, -0.46193976625564337, -0.4619397662556434, -0.19134171618254517, 0.191341716182545, 0.46193976625564326],
    [0.4157348061512726, -0.0975451610080641, -0.4903926402016152, -0.2777851165098011, 0.2777851165098009, 0.4903926402016152, 0.09754516100806439, -0.41573480615127256],
    [0.3535533905932738, -0.35355339059327373, -0.35355339059327384, 0.3535533905932737, 0.35355339059327384, -0.35355339059327334, -0.35355339059327356, 0.3535533905932733],
    [0.27778511650980114, -0.4903926402016152, 0.09754516100806415, 0.41573480615127273, -0.41573480615127256, -0.09754516100806401, 0.4903926402016153, -0.27778511650980076],
    [0.19134171618254492, -0.4619397662556434, 0.46193976625564326, -0.19134171618254495, -0.19134171618254528, 0.46193976625564337, -0.4619397662556432, 0.19134171618254478],
    [0.09754516100806417, -0.2777851165098011, 0.41573480615127273, -0.4903926402016153, 0.4903926402016152, -0.4157348061512725, 0.27778511650980076, -0.09754516100806429],
];

/// Standard zig-zag scan order for an 8×8 block.
const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27,
    20, 13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58,
    59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

const MAGIC: &[u8; 4] = b"CDRB";
const FORMAT_VERSION: u8 = 1;
const HEADER_BYTES: usize = 10;

/// Pixels are mapped to `x * 250 - 125` before the transform. The
/// half-integer grid keeps the q=50 step (50) an exact divisor of the
/// constant-block DC, so flat images survive the quantizer exactly.
const PIXEL_SCALE: f64 = 250.0;
const PIXEL_SHIFT: f64 = 125.0;

/// Quality knob of the surrogate codec; higher means less distortion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecQuality(u8);

impl CodecQuality {
    pub fn new(q: u8) -> Result<Self> {
        if (1..=99).contains(&q) {
            Ok(Self(q))
        } else {
            Err(CdreError::InvalidQuality(q))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Uniform quantization step applied to every coefficient.
    pub fn step(self) -> f64 {
        (100 - self.0).max(1) as f64
    }
}

/// Original frame, its codec reconstruction, and the base stream rate.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub original: Tensor,
    pub compressed: Tensor,
    pub base_bpp: f64,
}

impl ImagePair {
    pub fn new(original: Tensor, compressed: Tensor, base_bpp: f64) -> Result<Self> {
        original.same_shape(&compressed)?;
        if !(base_bpp.is_finite() && base_bpp >= 0.0) {
            return Err(CdreError::InvalidArgument(format!(
                "base_bpp must be finite and nonnegative, got {base_bpp}"
            )));
        }
        Ok(Self {
            original,
            compressed,
            base_bpp,
        })
    }
}

/// One record of an external-pair manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalPairEntry {
    pub original_path: String,
    pub compressed_path: String,
    pub base_bpp: f64,
}

/// Manifest describing image pairs produced by an external codec.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExternalPairManifest {
    pub entries: Vec<ExternalPairEntry>,
}

impl ExternalPairManifest {
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if !(e.base_bpp.is_finite() && e.base_bpp >= 0.0) {
                return Err(CdreError::BadManifestEntry(format!(
                    "entry {i} ({}): base_bpp {} is invalid",
                    e.original_path, e.base_bpp
                )));
            }
        }
        Ok(())
    }
}

/// Builds an [`ImagePair`] for a manifest entry, naming the entry on error.
pub fn pair_from_entry(label: &str, original: Tensor, compressed: Tensor, base_bpp: f64) -> Result<ImagePair> {
    if original.shape() != compressed.shape() {
        return Err(CdreError::BadManifestEntry(format!(
            "{label}: original {:?} and compressed {:?} dimensions differ",
            original.shape(),
            compressed.shape()
        )));
    }
    ImagePair::new(original, compressed, base_bpp)
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    if image.rank() != 3 || image.dim(0) != 3 {
        return Err(CdreError::InvalidArgument(format!(
            "expected image shape [3, H, W], got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    if h == 0 || w == 0 {
        return Err(CdreError::EmptyInput);
    }
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(CdreError::InvalidArgument(format!(
            "image dimensions {h}x{w} exceed the 16-bit header fields"
        )));
    }
    Ok((h, w))
}

/// Symmetric (edge-inclusive reflect) index for padding; valid for any n ≥ 1.
fn mirror(i: usize, n: usize) -> usize {
    let j = i % (2 * n);
    if j < n {
        j
    } else {
        2 * n - 1 - j
    }
}

fn forward_dct_8x8(block: &mut [f64; 64]) {
    let mut tmp = [0.0f64; 64];
    for r in 0..8 {
        for k in 0..8 {
            let mut acc = 0.0;
            for n in 0..8 {
                acc += DCT_BASIS[k][n] * block[r * 8 + n];
            }
            tmp[r * 8 + k] = acc;
        }
    }
    for c in 0..8 {
        for k in 0..8 {
            let mut acc = 0.0;
            for n in 0..8 {
                acc += DCT_BASIS[k][n] * tmp[n * 8 + c];
            }
            block[k * 8 + c] = acc;
        }
    }
}

fn inverse_dct_8x8(block: &mut [f64; 64]) {
    let mut tmp = [0.0f64; 64];
    for c in 0..8 {
        for n in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += DCT_BASIS[k][n] * block[k * 8 + c];
            }
            tmp[n * 8 + c] = acc;
        }
    }
    for r in 0..8 {
        for n in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += DCT_BASIS[k][n] * tmp[r * 8 + k];
            }
            block[r * 8 + n] = acc;
        }
    }
}

/// Encodes an RGB image in `[0,1]` into a surrogate-codec bitstream.
pub fn dct_encode(image: &Tensor, q: CodecQuality) -> Result<Vec<u8>> {
    let (h, w) = check_image(image)?;
    let step = q.step();
    let (bh, bw) = (h.div_ceil(8), w.div_ceil(8));

    let mut writer = BitWriter::new();
    let data = image.data();
    for ch in 0..3 {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for by in 0..bh {
            for bx in 0..bw {
                let mut block = [0.0f64; 64];
                for j in 0..8 {
                    let sy = mirror(by * 8 + j, h);
                    for i in 0..8 {
                        let sx = mirror(bx * 8 + i, w);
                        block[j * 8 + i] = plane[sy * w + sx] * PIXEL_SCALE - PIXEL_SHIFT;
                    }
                }
                forward_dct_8x8(&mut block);
                encode_block(&mut writer, &block, step);
            }
        }
    }

    let mut out = Vec::with_capacity(HEADER_BYTES);
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(h as u16).to_be_bytes());
    out.extend_from_slice(&(w as u16).to_be_bytes());
    out.push(q.value());
    out.extend_from_slice(&writer.finish());
    Ok(out)
}

fn encode_block(writer: &mut BitWriter, coeffs: &[f64; 64], step: f64) {
    let mut accounted = 0u32;
    let mut run = 0u32;
    for &pos in ZIGZAG.iter() {
        let level = (coeffs[pos] / step).round() as i32;
        if level == 0 {
            run += 1;
        } else {
            writer.write_ue(run);
            writer.write_se(level);
            accounted += run + 1;
            run = 0;
        }
    }
    // Remaining positions are zero; a run reaching past the block end
    // doubles as the end-of-block marker.
    if accounted < 64 {
        writer.write_ue(64 - accounted);
    }
}

fn decode_block(reader: &mut BitReader<'_>, step: f64) -> Result<[f64; 64]> {
    let mut coeffs = [0.0f64; 64];
    let mut filled = 0u32;
    while filled < 64 {
        let run = reader.read_ue()?;
        if filled + run >= 64 {
            break;
        }
        filled += run;
        let level = reader.read_se()?;
        coeffs[ZIGZAG[filled as usize]] = level as f64 * step;
        filled += 1;
    }
    Ok(coeffs)
}

/// Decodes a surrogate-codec bitstream back to an RGB image in `[0,1]`.
pub fn dct_decode(bytes: &[u8]) -> Result<Tensor> {
    let malformed = |offset: usize, reason: &str| CdreError::MalformedBitstream {
        offset,
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_BYTES {
        return Err(malformed(bytes.len(), "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(malformed(0, "bad magic"));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(malformed(4, "unsupported version"));
    }
    let h = u16::from_be_bytes([bytes[5], bytes[6]]) as usize;
    let w = u16::from_be_bytes([bytes[7], bytes[8]]) as usize;
    if h == 0 || w == 0 {
        return Err(malformed(5, "zero dimensions"));
    }
    let q = bytes[9];
    let quality = CodecQuality::new(q).map_err(|_| malformed(9, "invalid quality"))?;
    let step = quality.step();

    let (bh, bw) = (h.div_ceil(8), w.div_ceil(8));
    let mut reader = BitReader::with_offset(&bytes[HEADER_BYTES..], HEADER_BYTES);
    let mut out = Tensor::zeros(&[3, h, w]);
    for ch in 0..3 {
        let base = ch * h * w;
        for by in 0..bh {
            for bx in 0..bw {
                let mut block = decode_block(&mut reader, step)?;
                inverse_dct_8x8(&mut block);
                for j in 0..8 {
                    let y = by * 8 + j;
                    if y >= h {
                        continue;
                    }
                    for i in 0..8 {
                        let x = bx * 8 + i;
                        if x >= w {
                            continue;
                        }
                        let v = (block[j * 8 + i] + PIXEL_SHIFT) / PIXEL_SCALE;
                        out.data_mut()[base + y * w + x] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Header-declared source dimensions (true, pre-padding) of a stream.
pub fn stream_dimensions(bytes: &[u8]) -> Result<(usize, usize)> {
    if bytes.len() < HEADER_BYTES || &bytes[0..4] != MAGIC {
        return Err(CdreError::MalformedBitstream {
            offset: 0,
            reason: "not a surrogate-codec stream".to_string(),
        });
    }
    let h = u16::from_be_bytes([bytes[5], bytes[6]]) as usize;
    let w = u16::from_be_bytes([bytes[7], bytes[8]]) as usize;
    Ok((h, w))
}

/// Bits per pixel of a byte stream against the true image dimensions.
pub fn measure_bpp(bitstream: &[u8], h: usize, w: usize) -> Result<f64> {
    if h * w == 0 {
        return Err(CdreError::InvalidArgument(
            "bpp requires a nonzero pixel count".to_string(),
        ));
    }
    Ok((8 * bitstream.len()) as f64 / (h * w) as f64)
}

/// Compresses and reconstructs an image, returning the pair with its
/// measured base-codec rate.
pub fn compress_pair(image: &Tensor, q: CodecQuality) -> Result<ImagePair> {
    let stream = dct_encode(image, q)?;
    let (h, w) = (image.dim(1), image.dim(2));
    let bpp = measure_bpp(&stream, h, w)?;
    let decoded = dct_decode(&stream)?;
    ImagePair::new(image.clone(), decoded, bpp)
}

/// PSNR in dB between two same-shape tensors valued in `[0,1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    if a.is_empty() {
        return Err(CdreError::EmptyInput);
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn seeded_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = crate::rng::stream_rng(seed, "codec-test-image", 0);
        let data = (0..3 * h * w).map(|_| rng.random::<f64>()).collect();
        Tensor::new(&[3, h, w], data).unwrap()
    }

    #[test]
    fn quality_range() {
        assert!(CodecQuality::new(0).is_err());
        assert!(CodecQuality::new(100).is_err());
        assert_eq!(CodecQuality::new(99).unwrap().step(), 1.0);
        assert_eq!(CodecQuality::new(10).unwrap().step(), 90.0);
    }

    #[test]
    fn mid_gray_roundtrips_bit_exactly_at_any_quality() {
        let img = Tensor::full(&[3, 64, 64], 0.5);
        for q in [1, 10, 37, 50, 80, 99] {
            let bytes = dct_encode(&img, CodecQuality::new(q).unwrap()).unwrap();
            let back = dct_decode(&bytes).unwrap();
            assert_eq!(back, img, "quality {q}");
        }
    }

    #[test]
    fn all_zeros_roundtrips_at_q50() {
        let img = Tensor::zeros(&[3, 16, 16]);
        let bytes = dct_encode(&img, CodecQuality::new(50).unwrap()).unwrap();
        let back = dct_decode(&bytes).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn decode_is_deterministic() {
        let img = seeded_image(3, 40, 56);
        let q = CodecQuality::new(35).unwrap();
        let a = dct_encode(&img, q).unwrap();
        let b = dct_encode(&img, q).unwrap();
        assert_eq!(a, b);
        assert_eq!(dct_decode(&a).unwrap(), dct_decode(&b).unwrap());
    }

    #[test]
    fn header_reports_true_dimensions_when_padded() {
        let img = seeded_image(4, 50, 41); // not multiples of 8
        let bytes = dct_encode(&img, CodecQuality::new(60).unwrap()).unwrap();
        assert_eq!(stream_dimensions(&bytes).unwrap(), (50, 41));
        let back = dct_decode(&bytes).unwrap();
        assert_eq!(back.shape(), &[3, 50, 41]);
    }

    #[test]
    fn truncated_stream_is_malformed() {
        let img = seeded_image(5, 24, 24);
        let mut bytes = dct_encode(&img, CodecQuality::new(50).unwrap()).unwrap();
        bytes.pop();
        match dct_decode(&bytes) {
            Err(CdreError::MalformedBitstream { .. }) => {}
            other => panic!("expected malformed bitstream, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_magic_is_malformed() {
        let img = seeded_image(6, 16, 16);
        let mut bytes = dct_encode(&img, CodecQuality::new(50).unwrap()).unwrap();
        bytes[0] = b'X';
        match dct_decode(&bytes) {
            Err(CdreError::MalformedBitstream { offset: 0, .. }) => {}
            other => panic!("expected malformed at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn empty_and_invalid_inputs() {
        let empty = Tensor::zeros(&[3, 0, 4]);
        assert_eq!(
            dct_encode(&empty, CodecQuality::new(50).unwrap()),
            Err(CdreError::EmptyInput)
        );
        assert!(measure_bpp(&[], 0, 10).is_err());
    }

    #[test]
    fn measure_bpp_arithmetic() {
        assert_eq!(measure_bpp(&[], 64, 64).unwrap(), 0.0);
        assert_eq!(measure_bpp(&[0u8; 1024], 64, 64).unwrap(), 2.0);
        let v = measure_bpp(&[0u8; 690], 720, 1280).unwrap();
        assert!((v - 5520.0 / 921_600.0).abs() < 1e-15);
    }

    #[test]
    fn bpp_matches_byte_length_exactly() {
        let img = seeded_image(7, 48, 32);
        let bytes = dct_encode(&img, CodecQuality::new(45).unwrap()).unwrap();
        let bpp = measure_bpp(&bytes, 48, 32).unwrap();
        assert_eq!(bpp, (8 * bytes.len()) as f64 / (48.0 * 32.0));
    }

    /// The reference path below is an independent scripted implementation:
    /// direct O(N^4) float DCT built from library cosines, straight
    /// per-coefficient rounding, direct inverse.
    #[test]
    fn psnr_matches_reference_quantizer() {
        let img = seeded_image(42, 64, 64);
        let q = 30u8;
        let bytes = dct_encode(&img, CodecQuality::new(q).unwrap()).unwrap();
        let decoded = dct_decode(&bytes).unwrap();
        let ours = psnr(&img, &decoded).unwrap();

        // Reference path (independent of the bitstream machinery).
        let (h, w) = (64usize, 64usize);
        let step = (100 - q) as f64;
        let pi = core::f64::consts::PI;
        let basis = |k: usize, n: usize| -> f64 {
            let s = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            s * ((2 * n + 1) as f64 * k as f64 * pi / 16.0).cos()
        };
        let mut rec = Tensor::zeros(&[3, h, w]);
        for ch in 0..3 {
            for by in 0..h / 8 {
                for bx in 0..w / 8 {
                    let mut px = [0.0f64; 64];
                    for j in 0..8 {
                        for i in 0..8 {
                            px[j * 8 + i] = img.data()[ch * h * w + (by * 8 + j) * w + bx * 8 + i]
                                * PIXEL_SCALE
                                - PIXEL_SHIFT;
                        }
                    }
                    // direct 2-D transform, quantize, inverse
                    let mut co = [0.0f64; 64];
                    for k in 0..8 {
                        for l in 0..8 {
                            let mut acc = 0.0;
                            for j in 0..8 {
                                for i in 0..8 {
                                    acc += px[j * 8 + i] * basis(k, j) * basis(l, i);
                                }
                            }
                            co[k * 8 + l] = (acc / step).round() * step;
                        }
                    }
                    for j in 0..8 {
                        for i in 0..8 {
                            let mut acc = 0.0;
                            for k in 0..8 {
                                for l in 0..8 {
                                    acc += co[k * 8 + l] * basis(k, j) * basis(l, i);
                                }
                            }
                            rec.data_mut()[ch * h * w + (by * 8 + j) * w + bx * 8 + i] =
                                ((acc + PIXEL_SHIFT) / PIXEL_SCALE).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        let theirs = psnr(&img, &rec).unwrap();
        assert!(
            (ours - theirs).abs() < 1e-6,
            "psnr {ours} vs reference {theirs}"
        );
    }

    #[test]
    fn rate_and_distortion_monotone_in_quality() {
        let corpus: Vec<Tensor> = (0..8).map(|i| seeded_image(100 + i, 64, 64)).collect();
        let mut prev_bpp = 0.0;
        let mut prev_psnr = 0.0;
        for q in [10u8, 30, 50, 70, 90] {
            let quality = CodecQuality::new(q).unwrap();
            let mut bpp = 0.0;
            let mut ps = 0.0;
            for img in &corpus {
                let bytes = dct_encode(img, quality).unwrap();
                bpp += measure_bpp(&bytes, 64, 64).unwrap();
                ps += psnr(img, &dct_decode(&bytes).unwrap()).unwrap();
            }
            bpp /= corpus.len() as f64;
            ps /= corpus.len() as f64;
            assert!(bpp >= prev_bpp, "bpp dropped at q={q}");
            assert!(ps >= prev_psnr, "psnr dropped at q={q}");
            prev_bpp = bpp;
            prev_psnr = ps;
        }
    }

    #[test]
    fn manifest_validation() {
        let manifest = ExternalPairManifest {
            entries: alloc::vec![ExternalPairEntry {
                original_path: "a.png".into(),
                compressed_path: "b.png".into(),
                base_bpp: -0.5,
            }],
        };
        assert!(matches!(
            manifest.validate(),
            Err(CdreError::BadManifestEntry(_))
        ));
    }

    #[test]
    fn pair_from_entry_rejects_dimension_mismatch() {
        let a = Tensor::zeros(&[3, 8, 8]);
        let b = Tensor::zeros(&[3, 8, 9]);
        match pair_from_entry("entry 0", a, b, 0.12) {
            Err(CdreError::BadManifestEntry(msg)) => assert!(msg.contains("entry 0")),
            other => panic!("unexpected {other:?}"),
        }
    }
}

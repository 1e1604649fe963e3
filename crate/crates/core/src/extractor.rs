//! Compression-sensitive feature extractor and feature-domain distortion.
//!
//! A siamese stack of three conv → instance-norm → leaky-rectifier
//! blocks. The same parameters process the original and the compressed
//! image, and distortion is the negated mean channel-wise cosine between
//! the two feature pyramids at each scale.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{CdreError, Result};
use crate::graph::{spatial_cosine_mean_value, NodeId, Tape};
use crate::nn::{Conv2d, Init, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Channel widths of the three extraction blocks.
pub const EXTRACTOR_CHANNELS: [usize; 3] = [8, 16, 24];
/// Epsilon of every instance-normalization in the pipeline.
pub const NORM_EPS: f64 = 1e-5;
/// Negative slope of every leaky rectifier in the pipeline.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Denominator guard of the cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// Minimum input side so the deepest scale is nonempty.
pub const MIN_INPUT_SIDE: usize = 8;

/// Three-scale features of one image.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 3],
}

impl FeaturePyramid {
    pub fn compatible(&self, other: &FeaturePyramid) -> Result<()> {
        for (a, b) in self.levels.iter().zip(&other.levels) {
            a.same_shape(b)?;
        }
        Ok(())
    }
}

/// Per-scale feature-domain distortion, each value in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistortionScore {
    pub per_scale: [f64; 3],
}

pub struct SensitiveExtractor {
    blocks: [Conv2d; 3],
    /// With multi-scale disabled only the first block runs (single-scale
    /// ablation); the pyramid degenerates to one level.
    pub multi_scale: bool,
}

impl SensitiveExtractor {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, multi_scale: bool) -> Self {
        let dims = EXTRACTOR_CHANNELS;
        let blocks = [
            Conv2d::new(
                store, rng, "extractor.block1.conv", ParamGroup::Extractor,
                3, dims[0], 3, 2, 1, false, Init::KaimingUniform,
            ),
            Conv2d::new(
                store, rng, "extractor.block2.conv", ParamGroup::Extractor,
                dims[0], dims[1], 3, 2, 1, false, Init::KaimingUniform,
            ),
            Conv2d::new(
                store, rng, "extractor.block3.conv", ParamGroup::Extractor,
                dims[1], dims[2], 3, 2, 1, false, Init::KaimingUniform,
            ),
        ];
        Self {
            blocks,
            multi_scale,
        }
    }

    /// Number of scales actually produced.
    pub fn num_scales(&self) -> usize {
        if self.multi_scale {
            3
        } else {
            1
        }
    }

    /// Builds the extraction graph for one image; returns one node per scale.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: NodeId) -> Result<Vec<NodeId>> {
        let shape = tape.value(image).shape();
        if shape.len() != 3 || shape[1] < MIN_INPUT_SIDE || shape[2] < MIN_INPUT_SIDE {
            return Err(CdreError::InputBelowMinimumSize);
        }
        let mut levels = alloc::vec::Vec::with_capacity(self.num_scales());
        let mut x = image;
        for block in self.blocks.iter().take(self.num_scales()) {
            let c = block.forward(tape, store, x)?;
            let n = tape.instance_norm(c, NORM_EPS)?;
            x = tape.leaky_relu(n, LEAKY_SLOPE);
            levels.push(x);
        }
        Ok(levels)
    }

    /// Inference convenience: runs the extractor on a plain tensor.
    pub fn extract(&self, store: &ParamStore, image: &Tensor) -> Result<FeaturePyramid> {
        if !self.multi_scale {
            return Err(CdreError::InvalidArgument(
                "full pyramid requires the multi-scale extractor".into(),
            ));
        }
        let mut tape = Tape::new();
        let input = tape.constant(image.clone());
        let levels = self.forward(&mut tape, store, input)?;
        Ok(FeaturePyramid {
            levels: [
                tape.value(levels[0]).clone(),
                tape.value(levels[1]).clone(),
                tape.value(levels[2]).clone(),
            ],
        })
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.count_scalars(ParamGroup::Extractor)
    }

    /// Analytic layer costs at a source resolution. MACs count both
    /// siamese passes (original and compressed image).
    pub fn costs(&self, h: usize, w: usize) -> alloc::vec::Vec<crate::nn::LayerCost> {
        let mut out = alloc::vec::Vec::new();
        let mut dims = (h, w);
        for (i, block) in self.blocks.iter().take(self.num_scales()).enumerate() {
            out.push(crate::nn::LayerCost {
                name: alloc::format!("extractor.block{}", i + 1),
                group: ParamGroup::Extractor,
                params: block.param_count(),
                macs: 2 * block.macs(dims.0, dims.1),
            });
            dims = block.out_dims(dims.0, dims.1);
        }
        out
    }
}

/// Mean per-location cosine similarity at one scale, clamped to `[-1, 1]`.
pub fn mean_scale_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    Ok(spatial_cosine_mean_value(a, b, COSINE_EPS))
}

/// Feature-domain distortion: per scale, the negated mean cosine between
/// the original-image and compressed-image features.
pub fn feature_distortion(f_o: &FeaturePyramid, f_c: &FeaturePyramid) -> Result<DistortionScore> {
    f_o.compatible(f_c)?;
    let mut per_scale = [0.0f64; 3];
    for (d, (a, b)) in per_scale.iter_mut().zip(f_o.levels.iter().zip(&f_c.levels)) {
        *d = -mean_scale_cosine(a, b)?;
    }
    Ok(DistortionScore { per_scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_setup() -> (ParamStore, SensitiveExtractor) {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream_rng(5, "init", 0);
        let ex = SensitiveExtractor::new(&mut store, &mut rng, true);
        (store, ex)
    }

    fn seeded_pyramid(seed: u64, scale: f64) -> FeaturePyramid {
        let mut rng = crate::rng::stream_rng(seed, "pyr", 0);
        let mut level = |c: usize, h: usize, w: usize| {
            let data = (0..c * h * w)
                .map(|_| scale * (rng.random::<f64>() - 0.5))
                .collect();
            Tensor::new(&[c, h, w], data).unwrap()
        };
        FeaturePyramid {
            levels: [level(8, 4, 4), level(16, 2, 2), level(24, 1, 1)],
        }
    }

    #[test]
    fn pyramid_shapes_for_64x64() {
        let (store, ex) = toy_setup();
        let img = Tensor::full(&[3, 64, 64], 0.3);
        let p = ex.extract(&store, &img).unwrap();
        assert_eq!(p.levels[0].shape(), &[8, 32, 32]);
        assert_eq!(p.levels[1].shape(), &[16, 16, 16]);
        assert_eq!(p.levels[2].shape(), &[24, 8, 8]);
    }

    #[test]
    fn odd_sizes_use_ceil_division() {
        let (store, ex) = toy_setup();
        let img = Tensor::full(&[3, 9, 13], 0.1);
        let p = ex.extract(&store, &img).unwrap();
        assert_eq!(p.levels[0].shape(), &[8, 5, 7]);
        assert_eq!(p.levels[1].shape(), &[16, 3, 4]);
        assert_eq!(p.levels[2].shape(), &[24, 2, 2]);
    }

    #[test]
    fn extraction_is_deterministic() {
        let (store, ex) = toy_setup();
        let mut rng = crate::rng::stream_rng(9, "img", 0);
        let data: alloc::vec::Vec<f64> = (0..3 * 16 * 16).map(|_| rng.random()).collect();
        let img = Tensor::new(&[3, 16, 16], data).unwrap();
        let a = ex.extract(&store, &img).unwrap();
        let b = ex.extract(&store, &img).unwrap();
        for (x, y) in a.levels.iter().zip(&b.levels) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn too_small_input_is_rejected() {
        let (store, ex) = toy_setup();
        let img = Tensor::zeros(&[3, 4, 4]);
        assert_eq!(
            ex.extract(&store, &img).unwrap_err(),
            CdreError::InputBelowMinimumSize
        );
    }

    #[test]
    fn zero_weights_produce_zero_features() {
        let (mut store, ex) = toy_setup();
        for id in store.ids().collect::<alloc::vec::Vec<_>>() {
            let z = Tensor::zeros(store.value(id).shape());
            *store.value_mut(id) = z;
        }
        let img = Tensor::full(&[3, 16, 16], 0.7);
        let p = ex.extract(&store, &img).unwrap();
        for level in &p.levels {
            assert!(level.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identical_pyramids_have_distortion_minus_one() {
        let p = seeded_pyramid(3, 1.0);
        let d = feature_distortion(&p, &p).unwrap();
        for v in d.per_scale {
            assert!((v + 1.0).abs() < 1e-12, "got {v}");
        }
    }

    #[test]
    fn orthogonal_locations_have_zero_distortion() {
        // Two channels; a = (1, 0), b = (0, 1) at every location.
        let a = Tensor::new(&[2, 2, 2], alloc::vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        let b = Tensor::new(&[2, 2, 2], alloc::vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0])
            .unwrap();
        assert_eq!(mean_scale_cosine(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cosine_matches_bruteforce_loop() {
        let p = seeded_pyramid(11, 1.0);
        let q = seeded_pyramid(12, 1.0);
        let d = feature_distortion(&p, &q).unwrap();
        for (scale, (a, b)) in p.levels.iter().zip(&q.levels).enumerate() {
            let (c, h, w) = (a.dim(0), a.dim(1), a.dim(2));
            let mut total = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let mut dot = 0.0;
                    let mut na = 0.0;
                    let mut nb = 0.0;
                    for ci in 0..c {
                        let av = a.data()[ci * h * w + y * w + x];
                        let bv = b.data()[ci * h * w + y * w + x];
                        dot += av * bv;
                        na += av * av;
                        nb += bv * bv;
                    }
                    total += dot / (na.sqrt() * nb.sqrt() + 1e-12);
                }
            }
            let expect = -total / (h * w) as f64;
            assert!(
                (d.per_scale[scale] - expect).abs() < 1e-6,
                "scale {scale}: {} vs {expect}",
                d.per_scale[scale]
            );
        }
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let p = seeded_pyramid(21, 1.0);
        let q = seeded_pyramid(22, 1.0);
        let p_scaled = FeaturePyramid {
            levels: [
                p.levels[0].map(|v| 3.7 * v),
                p.levels[1].map(|v| 3.7 * v),
                p.levels[2].map(|v| 3.7 * v),
            ],
        };
        let q_scaled = FeaturePyramid {
            levels: [
                q.levels[0].map(|v| 0.04 * v),
                q.levels[1].map(|v| 0.04 * v),
                q.levels[2].map(|v| 0.04 * v),
            ],
        };
        let d1 = feature_distortion(&p, &q).unwrap();
        let d2 = feature_distortion(&p_scaled, &q_scaled).unwrap();
        for (a, b) in d1.per_scale.iter().zip(d2.per_scale) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn distortion_is_bounded() {
        for seed in 0..20 {
            let p = seeded_pyramid(100 + seed, 10.0);
            let q = seeded_pyramid(200 + seed, 0.01);
            let d = feature_distortion(&p, &q).unwrap();
            for v in d.per_scale {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = seeded_pyramid(1, 1.0);
        let mut q = seeded_pyramid(2, 1.0);
        q.levels[1] = Tensor::zeros(&[16, 3, 3]);
        assert!(matches!(
            feature_distortion(&p, &q),
            Err(CdreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn siamese_parameter_count_is_shared_and_small() {
        let (store, ex) = toy_setup();
        let count = ex.param_count(&store);
        // 8*3*9 + 16*8*9 + 24*16*9
        assert_eq!(count, 216 + 1152 + 3456);
        assert!(count <= 6000);
        // processing two images does not add parameters
        let img = Tensor::full(&[3, 16, 16], 0.2);
        let _ = ex.extract(&store, &img).unwrap();
        let _ = ex.extract(&store, &img).unwrap();
        assert_eq!(ex.param_count(&store), count);
    }
}

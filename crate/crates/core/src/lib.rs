//! Core pipeline for compression-distortion representation embedding.
//!
//! The crate is organized around the dataflow of the pipeline:
//!
//! - [`codec`] — a block-DCT surrogate base codec producing compressed
//!   images with measured bitrate, plus the external-pair types for
//!   images coded elsewhere.
//! - [`extractor`] — the siamese compression-sensitive extractor and the
//!   feature-domain distortion score.
//! - [`distortion`] — the lightweight distortion codec: modulated
//!   encoder, binary quantizer, bit-exact side-channel bitstream, and
//!   the CNN/token decoders.
//! - [`embedding`] — progressive transformation of the decoded
//!   distortion feature and its residual embedding into backbone stages.
//! - [`backbone`] — toy four-stage CNN and transformer backbones with
//!   embedding hook points and a classification head.
//! - [`data`] — a procedurally rendered synthetic recognition dataset.
//! - [`training`] — the composite loss and the frozen-downstream /
//!   joint training regimes.
//! - [`eval`] — rate-task curves, Bjøntegaard delta-rate, parameter and
//!   MACs accounting, and the ablation harness.
//!
//! Everything is `no_std`-compatible (with `alloc`); file IO and the
//! command-line front end live in the companion `cdre` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod backbone;
pub mod bitio;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod distortion;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod graph;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{CdreError, Result};
pub use tensor::Tensor;

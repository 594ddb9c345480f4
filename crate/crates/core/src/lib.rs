//! Viewpoint-keyed steganography for neural radiance fields.
//!
//! A radiance field is trained on an ordinary multi-view scene. A secret
//! camera pose acts as the key: the image rendered from that pose is fed to a
//! small convolutional extractor that was overfit to emit the payload bits,
//! while renders from other poses decode to noise. This crate contains the
//! whole pipeline: a reverse-mode autodiff engine, field training, volume
//! rendering, the message codec (bit-plane framing plus Reed-Solomon),
//! extractor training, embed/extract orchestration, robustness sweeps, and a
//! binary container format for shipping field and extractor weights.

pub mod adam;
pub mod codec;
pub mod container;
pub mod dataset;
pub mod extractor;
pub mod field;
pub mod img;
pub mod pipeline;
pub mod render;
pub mod tape;
pub mod tensor;

//! Scene-conditioned text-to-image token generation at desk scale.
//!
//! The pipeline tokenizes three aligned modalities — a text caption (BPE),
//! a semantic scene layout (VQ-SEG), and an RGB image (VQ-IMG) — into one
//! packed sequence consumed by a decoder-only transformer, then samples new
//! image (and optionally scene) tokens with classifier-free guidance.
//! Everything runs on a procedural synthetic corpus whose renderer has an
//! exact inverse, so text/image alignment is scored by an oracle instead of
//! perceptual metrics.

pub mod error;
pub mod harness;
pub mod io;
pub mod ndgrad;
pub mod nn;
pub mod sampler;
pub mod sbt;
pub mod scene;
pub mod textbpe;
pub mod vq;
pub mod vqimg;
pub mod vqseg;
pub mod rng;

pub use error::{Error, Result};
pub use ndgrad::Tensor;

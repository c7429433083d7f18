//! Agent-centric contrastive learning over Vision Transformer token features.
//!
//! The pipeline: a scene image and its binary agent mask are cropped as a
//! pair, the mask is propagated to the ViT patch grid by a threshold rule,
//! spatially spread keys are drawn from agent and environment regions with
//! 2D farthest point sampling, and two symmetric InfoNCE terms pull each
//! class of token features together while pushing the classes apart. The
//! contrastive term is fused across encoder layers and added to a proxy
//! task loss, and everything trains end-to-end with a hand-derived backward
//! pass through the transformer.
//!
//! All math runs in `f64`, all randomness flows through the in-repo
//! [`numerics::Rng`], and single-threaded runs are bit-deterministic.

pub mod cli;
pub mod contrast;
pub mod error;
pub mod maskgrid;
pub mod numerics;
pub mod sampler;
pub mod synthworld;
pub mod trainrun;
pub mod vit;

pub use error::{Error, Result};

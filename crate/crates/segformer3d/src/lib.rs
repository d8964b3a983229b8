//! SegFormer3D: a hierarchical transformer for volumetric segmentation,
//! built on a self-contained dense tensor engine with reverse-mode autodiff.
//!
//! The crate covers the full desk-scale pipeline: synthetic volumetric data
//! generation, the four-stage efficient-attention encoder with its all-MLP
//! decoder, Dice/cross-entropy losses, an analytic parameter/FLOP profiler,
//! and an AdamW + warmup/poly-decay trainer with checkpointing. The
//! `segformer3d` binary exposes everything as subcommands.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod profiler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

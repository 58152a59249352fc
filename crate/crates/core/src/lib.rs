//! Scale-wise (next-scale) autoregressive image generation at desk scale.
//!
//! The crate covers tokenization into multi-scale latents, a block-causal
//! transformer generator, teacher forcing, naive student-forcing schedules,
//! self-autoregressive refinement (stagger-scale rollout with a contrastive
//! student-forcing loss), sampling, evaluation and experiment plumbing.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the common choices.

pub mod error;
pub mod evaluation;
pub mod generator;
pub mod grid;
pub mod pyramid;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod training;
pub mod workbench;

pub use error::{Error, Result};
pub use grid::Grid;
pub use scalar::Scalar;

pub type Generator32 = generator::Generator<f32>;
pub type Generator64 = generator::Generator<f64>;
pub type Codebook32 = pyramid::Codebook<f32>;
pub type Codebook64 = pyramid::Codebook<f64>;
pub type LatentPyramid32 = pyramid::LatentPyramid<f32>;
pub type LatentPyramid64 = pyramid::LatentPyramid<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type Trainer64 = training::Trainer<f64>;

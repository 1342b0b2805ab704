//! Cross-skeleton text-to-motion generation.
//!
//! The crate trains a pair of transformer motion autoencoders over two
//! different skeleton topologies, ties their latent spaces together through
//! the joints both skeletons share (the primal joints) and a text embedding
//! space, and evaluates generation quality with a retrieval/distribution
//! metric suite. Everything runs on the CPU with a built-in reverse-mode
//! tensor engine.

pub mod motion;
pub mod real;
pub mod rng;
pub mod rotmath;
pub mod skeleton;
pub mod tensor;
pub mod textembed;
pub mod datagen;
pub mod motionae;
pub mod crossdomain;
pub mod gradcheck;
pub mod trainer;
pub mod metrics;
pub mod config;
pub mod pipeline;

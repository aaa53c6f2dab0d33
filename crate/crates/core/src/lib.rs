//! Pose-shared identity alignment at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`pose`] – Euler angles, bounding boxes and frame geometry.
//! * [`euler_embedding`] – periodic sinusoidal encoding of head pose.
//! * [`aligner`] – tokenizer, pose injection, dictionary projection and the
//!   hand-written backward pass.
//! * [`contrastive`] – the symmetric InfoNCE objective with a learnable
//!   temperature, plus the mutual-information lower bound.
//! * [`synth`] – deterministic synthetic identities rendered under varying pose.
//! * [`trainer`] – Adam training loop, gradient checking, retrieval evaluation.
//! * [`curation`] – pose-track filtering and manifest assembly.
//! * [`analysis`] – activation statistics, PCA projection, perturbation sweeps
//!   and ablation grids.

pub mod aligner;
pub mod analysis;
pub mod contrastive;
pub mod curation;
pub mod error;
pub mod euler_embedding;
pub mod pose;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

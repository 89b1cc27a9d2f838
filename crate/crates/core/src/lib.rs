//! Gaussian-primitive semantic occupancy prediction.
//!
//! A scene is a fixed-size set of anisotropic 3D Gaussians. Camera and LiDAR
//! features are lifted onto the Gaussian anchors, smoothed against each other,
//! fused, refined by a selective state-space scan over a Morton-ordered
//! sequence, and finally splatted into a dense semantic voxel grid.
//!
//! Every differentiable stage exposes a forward pass that returns a cache and a
//! hand-written backward pass. [`numerics::finite_difference_gradient`] is the
//! oracle all of them are checked against (see [`gradcheck`]).
//!
//! Module map:
//!
//! - [`numerics`]: dense tensors, softmax, layer norm, attention, RNG.
//! - [`scene`]: Gaussians, covariance, splatting, refinement blocks, file formats.
//! - [`lifting`]: LiDAR depth-wise deformable aggregation and camera sampling.
//! - [`ebfs`]: entropy-based smoothing between the two feature streams.
//! - [`aclf`]: adaptive camera/LiDAR fusion.
//! - [`mamba`]: Morton ordering, selective scan and the parameter head.
//! - [`losses`]: cross-entropy, Lovász-softmax, IoU and mIoU.
//! - [`engine`]: model configuration, end-to-end training and ablations.
//! - [`harness`]: synthetic scenes, sensor degradation and exports.

pub mod aclf;
pub mod ebfs;
pub mod engine;
mod error;
pub mod gradcheck;
pub mod harness;
pub mod lifting;
pub mod losses;
pub mod mamba;
pub mod numerics;
pub mod scene;

pub use error::{Error, Result};
pub use numerics::{Real, Rng, Tensor};

/// Whether a forward pass draws its stochastic choices (train) or takes the
/// deterministic path (eval).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/representation.md")]
    pub struct Representation;
    #[doc = include_str!("../../../book/src/lifting.md")]
    pub struct Lifting;
    #[doc = include_str!("../../../book/src/smoothing.md")]
    pub struct Smoothing;
    #[doc = include_str!("../../../book/src/fusion.md")]
    pub struct Fusion;
    #[doc = include_str!("../../../book/src/head.md")]
    pub struct Head;
    #[doc = include_str!("../../../book/src/losses.md")]
    pub struct Losses;
    #[doc = include_str!("../../../book/src/gradients.md")]
    pub struct Gradients;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
}

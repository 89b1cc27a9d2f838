//! Dense-array math shared by every stage, plus the finite-difference oracle.
//!
//! The scalar type is [`Real`]: `f64` by default, `f32` with the `f32` cargo
//! feature. All acceptance tolerances assume `f64`.

mod activation;
mod fd;
mod linear;
mod ops;
mod params;
mod rng;
mod tensor;

pub use activation::{logistic, silu, silu_grad, softplus};
pub use fd::{finite_difference_gradient, relative_error, DEFAULT_FD_STEP};
pub use linear::Linear;
pub use ops::{
    attention_backward, attention_forward, cosine_similarity, cosine_similarity_backward,
    layer_norm, layer_norm_backward, layer_norm_forward, scaled_dot_attention, softmax,
    softmax_backward, LayerNormCache, COSINE_EPS,
};
pub(crate) use params::impl_parameters;
pub use params::{join_name, Parameters};
pub use rng::{Rng, RngState};
pub use tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

pub const PI: Real = std::f64::consts::PI as Real;

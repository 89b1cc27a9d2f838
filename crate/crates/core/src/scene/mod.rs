//! Gaussian primitives, semantic evaluation, Gaussian-to-voxel splatting,
//! per-Gaussian refinement blocks and the on-disk formats for grids and sets.

mod gaussian;
pub mod io;
mod refine;
mod splat;

pub use gaussian::{
    covariance, evaluate_gaussian, normalize_quat, normalize_quat_backward, precision_matrix,
    rotation_backward, rotation_matrix, Gaussian, GaussianSet, Mat3, Vec3, QUAT_TOLERANCE,
};
pub use refine::{RefineBlock, RefineCache};
pub use splat::{
    argmax_labels, splat, splat_backward, GridSpec, VoxelGrid, DEFAULT_CUTOFF_K, EMPTY_CLASS,
};

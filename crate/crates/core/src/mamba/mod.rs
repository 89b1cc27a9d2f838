//! Serialization-based refinement: Gaussians are laid out along a
//! space-filling curve, passed through selective state-space blocks and
//! decoded into per-Gaussian parameter updates.

mod head;
mod order;
mod scan;

pub use head::{
    gauss_mamba_refine, head_width, predict_occupancy, MambaCache, MambaConfig, MambaParams,
};
pub use order::{
    encoding_width, inverse_permutation, morton_key, order_3d_to_1d, positional_encode,
    positional_encode_backward, Bounds, OrderingCurve,
};
pub use scan::{selective_scan, selective_scan_backward, ScanGrads, SsmBlock, SsmCache};

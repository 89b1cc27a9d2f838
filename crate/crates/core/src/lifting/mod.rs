//! Lifting sensor features onto Gaussian anchors.
//!
//! LiDAR points are voxelized into a [`FeatureVolume`]; each anchor samples
//! every depth plane at `P` learned keypoints, the plane features are pooled
//! into `K` chunks, modulated by attention across chunks and blended with the
//! plain depth mean through a learned gate. The camera path samples a single
//! [`CameraFeatureMap`] around each projected anchor.

mod camera;
mod ldfa;
mod sample;
mod volume;

pub use camera::{
    camera_backward, camera_forward, camera_lift, decode_camera, encode_camera, read_camera,
    write_camera, CameraCache, CameraFeatureMap, CameraLiftParams, PinholeCamera, CAMERA_MAGIC,
    NEAR_PLANE,
};
pub use ldfa::{
    chunk_aggregate, column_mean_backward, column_mean_forward, cross_depth_modulation,
    gated_global_fusion, ldfa_backward, ldfa_forward, ldfa_lift, ChunkPlan, DepthAttention,
    LdfaCache, LdfaConfig, LdfaParams,
};
pub use sample::{deformable_sample, deformable_sample_backward, PlaneView};
pub use volume::{
    decode_volume, encode_volume, point_cloud_to_volume, read_volume, write_volume, FeatureVolume,
    LidarPoint, VolumeSpec, POINT_FEATURES, VOLUME_MAGIC,
};

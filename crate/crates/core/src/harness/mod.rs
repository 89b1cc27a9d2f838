//! Synthetic scenes standing in for real driving data: shape rasterization,
//! LiDAR and camera simulation, weather proxies and scene files.

mod degrade;
mod files;
mod scene;

pub use degrade::{degrade, Degradation, DegradeConfig};
pub use files::{
    decode_points, encode_points, export_grid_text, read_scene, write_scene, ScenePaths,
    POINTS_MAGIC,
};
pub use scene::{
    class_intensity, generate_scene, random_layout, rasterize, CameraSpec, LayoutConfig, LidarSpec,
    SceneSpec, Shape, SyntheticScene, BOX_CLASS, CLASS_NAMES, CYLINDER_CLASS, GROUND_CLASS,
};

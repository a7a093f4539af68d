//! Synthetic scenes with known geometry: analytic shapes, a camera rig,
//! sphere-traced images and depth, and noisy guide point clouds.

mod dataset;
mod render;
mod shapes;

pub use dataset::{format_cameras, parse_cameras, Dataset, SceneConfig};
pub use render::{
    camera_rig, downsample_interval, render_ground_truth, sample_point_cloud, shade, trace, HalfSpace, NoiseModel,
    RigConfig, MAX_TRACE_STEPS,
};
pub use shapes::{AnalyticScene, SceneKind, Shape, Texture};

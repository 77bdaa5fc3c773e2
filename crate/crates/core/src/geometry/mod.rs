//! Deterministic point-set kernels.

mod cloud;
mod kdtree;
mod sampling;

pub use cloud::{dist2, norm, Normalization, Point, PointCloud};
pub use kdtree::SpatialIndex;
pub use sampling::{fps, fps_points, random_downsample, viewpoint_crop, viewpoint_crop_indices};

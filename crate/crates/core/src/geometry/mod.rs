//! Meshes, poses, pinhole cameras and the z-buffered rasterizer that
//! produces pixel-aligned RGB images and point maps.

mod camera;
mod image;
pub(crate) mod mesh;
pub mod obj;
mod raster;

pub use camera::{sample_views, Camera, Pose};
pub use image::{write_mask_png, write_rgb_png, Image};
pub use mesh::{normalize_mesh, Affine, Mesh};
pub use raster::{decode_coord, encode_coord, rasterize, render_viewset, RenderConfig, RenderOutput, ViewSet};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Lower bound of stored point-map values for covered pixels.
pub const POINTMAP_LO: f32 = 0.05;
/// Upper bound of stored point-map values for covered pixels.
pub const POINTMAP_HI: f32 = 0.95;
/// Stored value of every point-map channel at background pixels.
pub const BACKGROUND: f32 = 0.0;

//! Hybrid room reconstruction: a textured layout mesh for walls, floor and
//! ceiling, and 3D Gaussians for everything else, trained jointly with a
//! per-instance mask loss that pushes each object mask to be either fully
//! Gaussian or fully mesh.
//!
//! Everything numeric is generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common cases.

pub mod camera;
pub mod checkpoint;
pub mod compositor;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gaussian;
pub mod gaussian_raster;
pub mod image_buf;
pub mod linalg;
pub mod losses;
pub mod masks;
pub mod mesh;
pub mod mesh_raster;
pub mod metrics;
pub mod scalar;
pub mod sh;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Camera = camera::Camera<f32>;
pub type Gaussian = gaussian::Gaussian3D<f32>;
pub type GaussianSet = gaussian::GaussianSet<f32>;
pub type LayoutMesh = mesh::LayoutMesh<f32>;
pub type Image = image_buf::ImageBuffer<f32>;
pub type Dataset = dataset::Dataset<f32>;
pub type TrainState = trainer::TrainState<f32>;
pub type Trainer<'a> = trainer::Trainer<'a, f32>;

pub type Camera64 = camera::Camera<f64>;
pub type Gaussian64 = gaussian::Gaussian3D<f64>;
pub type GaussianSet64 = gaussian::GaussianSet<f64>;
pub type LayoutMesh64 = mesh::LayoutMesh<f64>;
pub type Image64 = image_buf::ImageBuffer<f64>;
pub type Dataset64 = dataset::Dataset<f64>;
pub type TrainState64 = trainer::TrainState<f64>;

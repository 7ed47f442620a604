//! Weakly supervised 3D radio map estimation from a building map and sparse samples.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for gradient checks).

pub mod ablation;
pub mod autodiff;
pub mod error;
pub mod eval;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type RadioVolume32 = volume::RadioVolume<f32>;
pub type RadioVolume64 = volume::RadioVolume<f64>;
pub type BuildingHeightMap32 = volume::BuildingHeightMap<f32>;
pub type BuildingHeightMap64 = volume::BuildingHeightMap<f64>;
pub type Scene32 = volume::Scene<f32>;
pub type Scene64 = volume::Scene<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;

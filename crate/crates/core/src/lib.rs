//! Generative box detection by rectified flow: boxes start as noise in an
//! unconstrained 4-d space and a learned velocity field carries them to the
//! objects in a handful of Euler steps.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! checks); the aliases below name the common instantiations.

pub mod autograd;
pub mod baseline;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flowpath;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{FlowDetError, Result};
pub use scalar::Scalar;

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type NormalizedBox32 = geometry::NormalizedBox<f32>;
pub type NormalizedBox64 = geometry::NormalizedBox<f64>;
pub type FlowVector32 = geometry::FlowVector<f32>;
pub type FlowVector64 = geometry::FlowVector<f64>;
pub type Detection32 = geometry::Detection<f32>;
pub type Detection64 = geometry::Detection<f64>;
pub type Detector32 = model::Detector<f32>;
pub type Detector64 = model::Detector<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;

//! Teacher-student semi-supervised BEV detection on a synthetic world.

pub mod audit;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod feature_map;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod scalar;
pub mod teacher;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases used throughout the detector.
pub type Tensor = autodiff::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type ParamStore = autodiff::ParamStore<f64>;
pub type FeatureMap = feature_map::FeatureMap<f64>;
pub type Box3DLite = geometry::Box3DLite<f64>;
pub type EgoTransform = geometry::EgoTransform<f64>;

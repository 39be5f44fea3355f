pub mod error;
pub mod folds;
pub mod harness;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod sampler;
pub mod scalar;
pub mod stack;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision reference network, used for training and inference.
pub type Net = model::ReferenceNet<f32>;
/// Double-precision reference network, used for gradient checks.
pub type Net64 = model::ReferenceNet<f64>;
pub type WindowedStack32 = preprocess::WindowedStack<f32>;
pub type PatchDataset32 = sampler::PatchDataset<f32>;

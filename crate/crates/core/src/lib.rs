pub mod augment;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod ini;
pub mod instances;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod posesync;
pub mod stpt;
pub mod synthscene;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};

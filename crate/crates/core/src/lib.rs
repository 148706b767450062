//! Multi-granularity referring expression segmentation at desk scale.

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod params;
pub mod tensor;
pub mod types;
pub mod metrics;
pub mod encoders;
pub mod mgvf;
pub mod mgfe;
pub mod pixel_decoder;
pub mod synth;
pub mod model;
pub mod train;
pub mod engine;
pub mod gradsuite;

pub use error::{Error, Result};
pub use tensor::Matrix;

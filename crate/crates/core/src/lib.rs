//! seatwin: a physics-guided probabilistic surrogate for underwater acoustic
//! transmission loss, with the operational tooling around it — synthetic data
//! generation, variational training, hydrophone assimilation, and per-leg
//! vessel speed optimization against sound exposure level.

pub mod assimilate;
pub mod autodiff;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod geo;
pub mod linalg;
pub mod model;
pub mod model_io;
pub mod physics;
pub mod scratch;
pub mod simd;
pub mod svgp;
pub mod train;
pub mod tensor;

pub mod voyage;

pub use error::{Error, Result};

//! Point-guided neural implicit surface reconstruction.

pub mod diffcore;
pub mod evalx;
pub mod fields;
pub mod pointguide;
pub mod projection;
pub mod renderer;
pub mod rng;
pub mod scenegen;
pub mod train;
mod error;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tape64 = diffcore::Tape<f64>;
pub type Tape32 = diffcore::Tape<f32>;
pub type ParamStore64 = diffcore::ParamStore<f64>;
pub type ParamStore32 = diffcore::ParamStore<f32>;

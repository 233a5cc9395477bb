pub mod benchmark;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pcd;
pub mod prob;
pub mod raster;
pub mod renderer;
pub mod rig;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod daiam;
pub mod dam;
pub mod dataset;
pub mod ddaiam;
pub mod error;
pub mod eval;
pub mod graph;
pub mod image;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod raingen;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use image::{Image, Mask};
pub use model::{Model, Variant};
pub use tensor::{Scalar, Shape, Tensor};

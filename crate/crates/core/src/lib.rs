pub mod autograd;
pub mod checkpoint;
pub mod clicks;
pub mod config;
pub mod data;
pub mod debug;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod model;
pub mod mst;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod raster;
pub mod simulate;
pub mod sparse;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::MstModel;
pub use tensor::{DType, Real, Tensor};

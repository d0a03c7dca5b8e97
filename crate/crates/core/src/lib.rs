pub mod autodiff;
pub mod config;
pub mod context;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod params;
pub mod patching;
pub mod probe;
pub mod report;
pub mod rng;
pub mod run;
pub mod store;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Graph, Param, ParamId, ParamIds, Var};
pub use error::{GimError, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;

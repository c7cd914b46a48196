pub mod chipstore;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod head;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Real, Tensor};

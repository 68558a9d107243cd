pub mod code_attention;
pub mod code_space;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gating_loss;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod ontology;
pub mod relation_graph;
pub mod training;

pub use error::{Error, Result};
pub use numerics::Dropout;

/// Double precision parameters, used for training, checkpoints and gradient checks.
pub type Params = numerics::ParamStore<f64>;
pub type Params32 = numerics::ParamStore<f32>;
pub type Matrix = numerics::Array<f64>;
pub type Matrix32 = numerics::Array<f32>;

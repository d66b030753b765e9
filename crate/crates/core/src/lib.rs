pub mod alignment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod crossmodal;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, OpKind, Var};
pub use params::{ParamId, ParamSet, Session};
pub use tensor::Tensor;

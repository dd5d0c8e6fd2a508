pub mod error;
pub mod kdloss;
pub mod kvfile;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synthtask;
pub mod teacherstore;

pub use error::{KdError, Result};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Model64 = model::Seq2SeqModel<f64>;
pub type Model32 = model::Seq2SeqModel<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type Graph32 = numerics::Graph<f32>;

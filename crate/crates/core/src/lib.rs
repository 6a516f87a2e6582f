pub mod corpus;
pub mod evaluator;
pub mod model;
pub mod numerics;
pub mod tokenizer;
pub mod trainer;

pub use numerics::{Array, Graph, Scalar, Var};

pub type Array32 = Array<f32>;
pub type Array64 = Array<f64>;

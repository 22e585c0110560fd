pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod ig;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod pretrained;
pub mod render;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};

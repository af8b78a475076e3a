//! Hybrid-attention graph convolutional network for skeleton action recognition.

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod ingest;
pub mod network;
pub mod params;
pub mod temporal;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

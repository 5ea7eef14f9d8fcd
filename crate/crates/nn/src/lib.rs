//! Small dense-array autodiff toolkit: a tape [`Graph`], NCHW convolutions,
//! parameter storage and Adam. Everything runs in `f64` on the CPU so that
//! finite-difference checks are meaningful.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{Conv2d, ResBlock};
pub use optim::{cosine_lr, Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("incompatible state: {0}")]
    Incompatible(String),
}

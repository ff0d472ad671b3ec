//! Minimal tensor engine: reverse-mode differentiation, layers, Adam,
//! gradient checking, seeded randomness and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use param::{Init, ParamStore, Parameter};
pub use rng::Rng;
pub use tensor::Tensor;

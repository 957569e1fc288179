//! Minimal reverse-mode automatic differentiation for convolutional networks.
//!
//! The engine is deliberately small: dense NCHW tensors, a tape ([`Graph`])
//! recording one forward pass, and the handful of layers residual
//! classifiers and image-to-image GANs need. Everything is generic over
//! [`Scalar`] so the same code trains in `f32` and is verified in `f64`.

pub mod container;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod im2col;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, NormKind, Var};
pub use params::{BufferId, Init, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

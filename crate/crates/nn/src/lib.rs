//! Minimal dense-tensor numerics with reverse-mode gradients.
//!
//! Everything the gesture models need and nothing more: 2-D convolution,
//! max pooling, batch normalization, tanh/sigmoid, fully connected layers,
//! a stateless stacked LSTM, dropout, softmax cross-entropy, Adam/SGD and
//! a small binary checkpoint format.
//!
//! Computation is generic over [`Scalar`] so models train in `f32` while
//! gradient checks run the identical code path in `f64`.

pub mod checkpoint;
mod error;
pub mod graph;
pub mod init;
pub mod lstm;
pub mod optim;
pub mod params;
mod scalar;
mod tensor;

pub use error::{NnError, Result};
pub use graph::{Graph, Mode, Padding, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

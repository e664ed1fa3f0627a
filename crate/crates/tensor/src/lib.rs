//! Small deterministic tensor library: row-major `f64` tensors, a reverse-mode
//! tape, and the AdamW / EMA update rules used for training.

pub mod check;
mod error;
mod gemm;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{AdamW, AdamWConfig, Ema};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{broadcast_shape, Gradients, Tape, Var};
pub use tensor::Tensor;

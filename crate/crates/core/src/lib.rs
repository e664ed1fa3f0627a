//! Multimodal flow-matching diffusion transformer with decoupled cross-modal attention.

pub mod conditioning;
pub mod data;
pub mod error;
pub mod flow;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pipelines;

pub use error::{MupadError, Result};
pub use mupad_tensor as tensor;

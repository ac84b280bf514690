//! Dense `f64` tensors and tape-based reverse-mode differentiation.
//!
//! This is the arithmetic substrate for the transformer in `ircan-core`:
//! just the operations a small decoder-only model needs, each with a
//! hand-written backward rule, plus [`finite_difference`] as an oracle.
//! Every operation rejects non-finite results at the point they appear.

mod error;
mod fd;
mod graph;
mod tensor;

pub use error::{NumError, Result};
pub use fd::finite_difference;
pub use graph::{gelu, Gradients, Graph, Var};
pub use tensor::Tensor;

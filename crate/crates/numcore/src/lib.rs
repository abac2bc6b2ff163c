//! Small dense-tensor engine with a reverse-mode tape.
//!
//! Everything here is deliberately narrow: 2-D row-major tensors, a dynamic
//! tape ([`Graph`]) that records one training step, a flat [`ParamStore`] that
//! owns all trainable tensors, the [`Adam`] optimizer, and the `RPDB` binary
//! checkpoint format.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod graph;
pub mod layers;
pub mod params;
pub mod real;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{NumError, Result};
pub use graph::{Grads, Graph, Var};
pub use layers::{Activation, Linear, Mlp, PatchConv};
pub use params::{Param, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

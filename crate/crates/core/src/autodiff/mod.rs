//! Tape-based reverse-mode automatic differentiation over small dense
//! matrices.
//!
//! The engine provides exactly the primitives the matching pipeline needs:
//! matrix product, elementwise arithmetic, relu/sigmoid, concatenation,
//! max-pooling over points, column gather/tile, a differentiable right
//! pseudo-inverse and mean aggregation over graph edges. Operations are
//! recorded on a [`Tape`]; [`Tape::backward_into`] replays the record in
//! reverse and accumulates gradients on [`Parameter`]s.
//!
//! A [`Tape`] is confined to one thread. Distinct tapes may run in parallel
//! over distinct batch elements; gradient merging is an explicit reduction
//! step owned by the caller.

mod check;
mod params;
mod tape;
mod tensor;


pub use check::gradient_check;
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Axis, Gradients, Tape};
pub use tensor::{AutodiffError, Tensor};

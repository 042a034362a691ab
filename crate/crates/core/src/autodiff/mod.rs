//! Minimal reverse-mode differentiable array engine.
//!
//! Forward computations are recorded on a [`Tape`]; [`Tape::backward`] walks
//! the tape in reverse (the recording order is already topological) and fills
//! the gradient of every node that depends on a parameter or a
//! gradient-requiring leaf.

mod array;
mod kernels;
mod mask;
mod param;
mod tape;

pub use array::DiffArray;
pub use mask::Mask;
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};

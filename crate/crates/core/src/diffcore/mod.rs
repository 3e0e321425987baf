//! Reverse-mode differentiation over small dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves come from
//! plain [`Tensor`] values (usually a [`ParamStore`]), and
//! [`Tape::backward`] walks the records in reverse to produce
//! [`Gradients`]. Only the operations the detector and its losses need are
//! provided; shapes are at most rank 3.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

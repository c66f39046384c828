//! Dense-tensor reverse-mode autodiff, parameter storage, gradient
//! checking, and checkpoint serialization.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
pub mod params;
mod shadow;
mod tape;

#[cfg(test)]
mod tests;

pub use gradcheck::{grad_check, GradCheckReport, LeafReport};
pub use kernels::set_corrupt_relu_backward;
pub use params::{fnv1a64, Bound, Init, Param, ParamStore};
pub use tape::{Tape, Tensor};

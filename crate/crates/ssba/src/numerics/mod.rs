//! Minimal reverse-mode autodiff over real `f64` tensors, an Adam
//! optimizer, and a finite-difference gradient checker.
//!
//! Complex quantities are represented as paired real/imaginary tensors.
//! One tape belongs to one training run; the pure tensor ops are safe to
//! call from multiple threads on distinct data.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS, DEFAULT_LR};
pub use gradcheck::{grad_check, grad_check_sampled};
pub use tape::{NodeId, Tape, BCE_CLAMP, MODULUS_FLOOR};
pub use tensor::{NumericsError, Tensor};

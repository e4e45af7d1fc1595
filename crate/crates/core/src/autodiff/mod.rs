//! Minimal reverse-mode differentiation engine.
//!
//! Values are immutable once created; each op records its parents and a
//! backward closure on the implicit graph. `backward` walks the graph in
//! reverse creation order and accumulates gradients into leaf tensors and
//! their bound [`Parameter`]s. Everything is `f64`; gradient-check fidelity
//! matters more than speed at this scale.

mod grad_check;
mod optim;
mod param;
mod tensor;

pub use grad_check::{grad_check, GradCheckReport};
pub use optim::Adam;
pub use param::Parameter;
pub use tensor::{backward, Tensor};

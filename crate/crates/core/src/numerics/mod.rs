//! Deterministic reverse-mode differentiation plus the layers, losses,
//! optimizer and learning-rate schedule used by the trainers.

mod dropout;
pub mod gradcheck;
mod kernels;
mod optim;
mod schedule;
mod tape;
mod tensor;

pub use dropout::{dropout, DEFAULT_DROPOUT};
pub use kernels::ConvGeom;
pub use optim::{sgd_step, OptimizerState, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};
pub use schedule::{poly_lr, LrSchedule, DEFAULT_POLY_POWER};
pub use tape::{sigmoid, Gradients, Tape, Var, BCE_EPS};
pub use tensor::Tensor;

//! Tensor algebra, reverse-mode differentiation, Adam and the learning-rate schedule.

mod adam;
mod gradcheck;
mod rng;
mod schedule;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_grad, relative_error, PrimitiveCase};
pub use rng::Stream;
pub use schedule::LrSchedule;
pub use tape::{Op, PrimitiveKind, Tape, Var, NORM_FLOOR};
pub use tensor::Tensor;

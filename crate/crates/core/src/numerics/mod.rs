//! Dense tensors, a reverse-mode tape, AdamW and seeded random streams.

mod gradcheck;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, primitive_suite, random_tensor, FD_STEP};
pub use optim::{adamw_step, AdamWConfig, OptimState};
pub use rng::Rng;
pub use tape::{row_softmax, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

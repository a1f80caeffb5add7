//! Minimal tensor and reverse-mode autodiff engine used by every model in
//! this workspace. No external ML framework: dense matmul is delegated to a
//! BLAS-style microkernel, everything else is hand-rolled and verified by
//! central-difference gradient checks.

#[cfg(feature = "f32")]
pub type Real = f32;
#[cfg(not(feature = "f32"))]
pub type Real = f64;

pub mod checkpoint;
pub mod error;
pub mod gemm;
pub mod gradcheck;
pub mod gradcheck_suite;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{TensorError, TensorResult};
pub use gradcheck::{GradCheck, GradCheckReport};
pub use optim::{Adam, Param, ParamSet};
pub use tape::{Tape, Tx};
pub use tensor::Tensor;

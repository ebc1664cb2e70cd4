//! Reverse-mode differentiation over dense tensors, plus the optimizer,
//! learning-rate schedule and checkpoint container used for training.

pub mod checkpoint;
mod gradcheck;
mod kernels;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{
    finite_difference_check, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR,
};
pub use kernels::conv_out_len;
pub use optim::{CyclicalLrSchedule, SgdState};
pub use params::{Bound, ParamId, ParamSet};
pub use scalar::{Precision, Scalar};
pub use tape::{CustomBackward, Tape, Var};
pub use tensor::Tensor;

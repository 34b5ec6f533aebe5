//! Dense `f64` tensors with a reverse-mode tape.

mod gradcheck;
mod layers;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{
    gradcheck, gradcheck_module, gradcheck_with_floor, relative_error, GradcheckReport, ParamCheck,
    DEFAULT_SCALE_FLOOR,
};
pub use layers::{BoundLinear, BoundMlp2, Linear, Mlp2, Module};
pub use param::Parameter;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

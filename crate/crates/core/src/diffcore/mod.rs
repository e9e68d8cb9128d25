//! Dense matrices, reverse-mode differentiation, parameters and Adam.

pub mod adam;
pub mod checkpoint;
pub mod loss;
pub mod mlp;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use loss::{bce, bce_mean, BCE_EPS};
pub use mlp::{mlp_apply, Activation, Mlp, MlpSpec};
pub use params::{init_uniform, Bound, GradTable, Param, ParamStore};
pub use tape::{sigmoid, Grads, RowMap, Tape, Var};
pub use tensor::{ewise, matmul, EwiseOp, Tensor};

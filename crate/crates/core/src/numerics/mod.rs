//! Dense `f64` tensor math and reverse-mode differentiation.

mod matrix;
pub mod ops;
mod optim;
mod param;
mod tape;

pub use matrix::Matrix;
pub use ops::{cross_entropy, gelu, layer_norm, matmul, softmax_rows};
pub use optim::{adamw_step, linear_warmup_schedule, AdamW, AdamWConfig, Moments, SCALE_FLOOR};
pub use param::{Param, ParamId, ParamKind, ParamStore};
pub use tape::{CustomOp, Gradients, Tape, Var};

pub mod binattn;
pub mod bitkernel;
pub mod cli;
pub mod error;
pub mod model;
pub mod numerics;
pub mod pretrain;
pub mod quant;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};

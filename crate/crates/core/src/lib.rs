pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod models;
pub mod nn;
pub mod rng;
pub mod session;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, LeafKind, Tape, Var};
pub use error::{Error, Result};
pub use rng::{Rng, RngState};
pub use tensor::{DType, Scalar, Tensor};

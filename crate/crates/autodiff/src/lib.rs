//! Dense `f64` tensors and a reverse-mode gradient tape sized for small
//! transformers and their editing losses.

mod activation;
mod error;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use activation::{std_normal_cdf, std_normal_pdf, Activation};
pub use error::{AutodiffError, Result};
pub use optim::Adam;
pub use tape::{top_k_indices, Tape, Var};
pub use tensor::Tensor;

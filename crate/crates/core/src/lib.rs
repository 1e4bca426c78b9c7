//! Sequential model editing on a desk-scale transformer: a patchable
//! feed-forward memory, the patch editor and its baselines, synthetic tasks,
//! and the evaluation harness.

pub mod data;
pub mod editors;
pub mod error;
pub mod example;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod patch;
pub mod patcher;
pub mod pipeline;
pub mod report;
pub mod sme;

pub use error::{Result, SmeError};
pub use example::{EditExample, Prediction, Scored, Split, Target};
pub use model::{ModelConfig, Task, TransformerModel};
pub use patch::PatchSet;

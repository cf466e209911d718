//! Hypernetwork-based continual learning with data-free task unlearning.
//!
//! A single hypernetwork generates the weights of a small MLP classifier for
//! each task from a learned task embedding. Tasks can be learned and later
//! unlearned in any interleaved order; unlearning needs no task data.

pub mod data;
pub mod engine;
pub mod error;
pub mod harness;
pub mod hypernet;
pub mod mainnet;
pub mod metrics;
pub mod nn;

pub use engine::{learn_task, unlearn_task, LearnConfig, NoiseSource, NoiseStrategy, UnlearnConfig};
pub use error::{Error, Result};
pub use hypernet::{init_hypernet, HypernetConfig, HypernetState, MainArch, TaskId};

//! Sparse recurrent networks trained with compressed-sensing based pruning.
//!
//! The crate is organised bottom-up: dense numerics, LSTM and dense layers
//! with hand-written gradients, synthetic and character-level tasks, a
//! sparse-recovery solver, pruning strategies and the training loop.

pub mod checkpoint;
pub mod error;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod optim;
pub mod pruning;
pub mod sensing;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
pub use model::{GroupId, KernelId, ModelGrads, SeqModel};
pub use numerics::{Matrix, SeededRng};
pub use pruning::{PruneEventReport, SensingController, SparsitySchedule, Strategy};
pub use sensing::{ActivationCapture, SolverConfig};
pub use tasks::{Objective, SequenceBatch, Task, TaskSpec};
pub use training::{train, LrSchedule, MetricsRow, MetricsSink, TrainConfig};

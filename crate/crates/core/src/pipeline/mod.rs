//! Model assembly, losses and training.
//!
//! Per group: standardised stream → connector (dense or mixture). The
//! connector outputs are appended along the token axis, fused by group
//! attention (or left as is), mean-pooled and classified by a linear head.
//! The loss is the head's cross-entropy plus weighted balance and z-losses of
//! every router.

mod check;
mod data;
mod flops;
mod forward;
mod model;
mod train;

pub use check::{check_gradients, gradient_check, BlockError, GradCheckReport, REL_ERROR_FLOOR};
pub use data::{Sample, SyntheticTask};
pub use flops::{flops_estimate, FlopsEstimate};
pub use forward::{evaluate, forward, task_loss, total_loss, Forward, Graph, LossReport};
pub use model::{Connector, ConnectorKind, FusionKind, LossWeights, Model, ModelConfig, TaskConfig};
pub use train::{train_step, Optimizer, OptimizerKind, Schedule, StepOutcome, TrainSettings, Trainer};

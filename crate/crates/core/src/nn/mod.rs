//! Layers, the multi-task and label-generation networks, optimizers and
//! checkpoints.

mod checkpoint;
mod layers;
mod networks;
mod optim;
mod params;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub(crate) use layers::he_normal;
pub use layers::{linear, Architecture, InputShape, Stack};
pub use networks::{build_labelgen_net, build_multitask_net, LabelGenNet, MultiTaskNet, MultiTaskOutput};
pub use optim::{schedule_lr, sgd_step, virtual_sgd_step, LrSchedule, OptimizerKind, OptimizerState};
pub use params::{GradMap, ParamSet};

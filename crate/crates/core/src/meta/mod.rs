//! First-order meta-learning, task-level evaluation and the
//! prototypical-network baseline.

mod adapt;
mod checkpoint;
mod hyper;
mod protonet;
mod train;

pub use adapt::{
    adapt_and_eval, adapt_trace, compare_inits, dropout_width, inner_adapt, mean_accuracy, DropoutPolicy,
    EvalResult, InitArm, InitCurves, PassCounts,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use hyper::HyperParams;
pub use protonet::{episode_loss_grad, mean_episode_accuracy, protonet_episode, protonet_train, Adam, ProtoHyper};
pub use train::{draw_tasks, meta_step, meta_train, LogRow, MetaState, StepStats, TrainLog};

//! Dense CNN building blocks with hand-written backward passes.

mod config;
mod kernels;
mod model;
mod params;

pub use config::{LayerSpec, ModelConfig, Shape};
pub use model::{
    argmax, backward_from_output, bce_loss, bce_loss_batch, conv2d_forward, draw_dropout_mask,
    forward_features, model_backward, model_forward, one_hot, DropoutMask, ForwardTrace, Mode,
    OneHot, PROB_CLAMP,
};
pub use params::{build_model, layout, sgd_step, InitPolicy, Layout, ParamRole, ParameterSet, Segment};

//! The trainable student encoder, the learnable anchor projection, and their
//! shared MLP machinery.

mod net;
mod optim;
pub mod train;

pub use net::{
    affine_backward, affine_forward, ForwardCache, LayerGrad, Linear, MlpGradients,
    ProjectionHead, StudentNet,
};
pub use optim::{sgd_step, OptimizerState, Schedule};

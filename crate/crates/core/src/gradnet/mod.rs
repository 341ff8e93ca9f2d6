//! Minimal differentiable residual network: forward passes that expose every
//! block output, and exact reverse-mode gradients w.r.t. the parameters and
//! the input.

pub mod backward;
pub mod checkpoint;
pub mod network;
pub mod optim;

pub use backward::{
    cross_entropy, grad_wrt_input, grad_wrt_params, grad_wrt_params_for, ConstantLoss,
    CrossEntropy, FeatureDistance, Gradients, InputDistance, LogitDistance, LossSeed, SumLoss,
    TraceLoss,
};
pub use checkpoint::{load_network, read_network, save_network, write_network};
pub use network::{argmax, init_xavier, Block, Dense, ForwardTrace, Layout, Network};
pub use optim::{cosine_lr, sgd_step, step_lr, MomentumSgd};

//! Dense network core: residual MLP, gradients, Adam, clipping, plateau
//! scheduling and the binary parameter format.

mod checkpoint;
mod net;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, MAGIC, VERSION};
pub use net::{Activation, Dense, Layout, NetParams, NetSpec, Network, Tape};
pub use optim::{clip_grad_norm, OptimizerState, PlateauScheduler, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

//! Q-networks with hand-written gradients, replay, and checkpoints.

pub mod checkpoint;
pub mod mlp;
pub mod optim;
pub mod qnet;
pub mod replay;

pub use checkpoint::{config_hash, Checkpoint, CHECKPOINT_VERSION};
pub use mlp::{gradient_check, Activations, BatchActivations, Gradients, Layer, Mlp};
pub use optim::{AdamState, Optimizer};
pub use qnet::{td_target, vdn_loss_gradient, QNet, Transition};
pub use replay::ReplayBuffer;

/// Independent copy of the live network for bootstrapping.
pub fn target_sync<T: Clone>(live: &T) -> T {
    live.clone()
}

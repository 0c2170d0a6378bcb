//! Dense feed-forward function approximation: regressors with analytic
//! gradients, an adaptive-moment optimizer, finite-difference checks and a
//! conditional flow-matching action head.

mod checkpoint;
mod flow;
pub mod gradcheck;
mod mlp;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_EXT};
pub use flow::{integrate_euler, FlowBatch, FlowHead};
pub use mlp::{gradient, Approximator, Trace};
pub use optim::{Adam, AdamConfig};

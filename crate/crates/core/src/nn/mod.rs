//! Function approximators and the optimizers used to train them.

mod adam;
mod lbfgs;
mod mlp;

pub use adam::{AdamConfig, AdamState, CosineSchedule};
pub use lbfgs::{lbfgs_minimize, lbfgs_minimize_batch, LbfgsConfig, LbfgsOutcome};
pub use mlp::{Mlp, DEFAULT_LEAKY_SLOPE};

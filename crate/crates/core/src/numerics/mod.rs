//! Dense `f64` arrays, a reverse-mode tape, parameter storage and the Adam
//! optimiser.

mod adam;
mod array;
pub mod gradcheck;
pub mod nn;
mod params;
pub mod rng;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use array::{log_add, log_softmax_rows, logsumexp, Array};
pub use params::{
    accumulate_grads, config_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, meta_path, save_checkpoint,
    CheckpointMeta, Graph, ParamGrads, ParamStore, CHECKPOINT_VERSION,
};
pub use tape::{Gradients, Tape, Var};

/// Log-domain floor: every log-probability is clamped here so that
/// `logsumexp` stays total and `0 · log p` never produces NaN.
pub const LOG_FLOOR: f64 = -1e30;

//! Linear probe and the AdamW optimizer used to train it.

mod adamw;
mod linear;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use linear::{
    argmax, decode_checkpoint, encode_checkpoint, predict_class, predict_proba, probe_loss_grad, read_checkpoint,
    train_probe, write_checkpoint, LinearProbe, ProbeConfig, ProbeGrad, ProbeLog, Standardization, CHECKPOINT_MAGIC,
};

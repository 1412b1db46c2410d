//! Optimization, early stopping, checkpoints and the generator training loop.

mod bundle;
mod checkpoint;
mod optim;
mod qg;

pub use bundle::{generator_checkpoint, guider_checkpoint, restore_generator, restore_guider, stored_train_config};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{accumulate, adam_step, batch_gradients, clip_global_norm, global_norm, AdamConfig, AdamState};
pub use qg::{
    bleu4_of, decode_all, early_stop_check, select_fraction, train_generator, write_metric_log, DevDecode, EpochLog,
    TrainConfig, TrainOutcome,
};

//! Transformer noise predictor over the 17 joint tokens, its training loop
//! and checkpoint format.

mod checkpoint;
mod model;
mod train;

pub use checkpoint::{Checkpoint, PoseModel, FORMAT_VERSION, MAGIC};
pub use model::{
    forward, predict_noise, timestep_encoding, DenoiserParams, EncoderBlock, Linear, ModelConfig, Norm, Params,
};
pub use train::{
    draw_noise, ema_update, loss_and_grads, noise_key, train_loop, training_step, AdamW, EpochLog, LrSchedule, TrainConfig,
    TrainOutcome,
};

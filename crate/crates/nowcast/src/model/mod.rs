//! Desk-scale trainable U-Net: hand-written forward/backward, AdamW with
//! decoupled weight decay, the validation-driven learning-rate schedule and
//! early stopping, plus the full train/predict pipelines.

pub mod layers;
mod train;
mod unet;

pub use train::{
    end_to_end_grad_check, load_checkpoint, predict, save_checkpoint, score_model, train,
    EpochStats, ModelState, PipelineConfig, TrainConfig, TrainError,
};
pub use unet::{
    backward_sample, forward_sample, init_params, parameter_count, zeros_like, Arch, ModelError,
    SampleCache, UNetConfig,
};

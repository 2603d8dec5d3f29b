//! Masked point modeling: patching, the pretraining and classification
//! models, optimization and checkpoints.

mod checkpoint;
mod config;
mod model;
mod optim;
mod patch;
mod train;

pub use checkpoint::{load_checkpoint, load_encoder, save_checkpoint, write_atomic, Checkpoint, LoadReport};
pub use config::{ModelConfig, TrainConfig};
pub use model::{Backbone, Classifier, PosEnc, PretrainInputs, PretrainModel, BACKBONE_PREFIXES};
pub use optim::{adamw_update, adamw_update_where, AdamState, AdamW, CosineSchedule};
pub use patch::{augment, patchify, patchify_and_mask, MaskSpec, PatchSet, Patches};
pub use train::{
    derive_seed, evaluate_classifier, finetune_classifier_epoch, mask_for, pretrain_epoch, pretrain_step, thread_pool,
    validation_loss, EpochMetrics, FinetuneMode, Labeled, Optimizer,
};

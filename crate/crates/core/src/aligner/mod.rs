//! Contrastive alignment of image features with frozen text embeddings.

mod loss;
mod model;
mod optim;
mod train;

pub use loss::{contrastive_loss, contrastive_loss_vars, to_facet_major, LossParts, LossVars};
pub use model::{AlignModel, TAU_INIT, TAU_MAX, TAU_MIN};
pub use optim::{learning_rate, AdamW, AdamWConfig, Schedule};
pub use train::{
    load_model, Checkpoint, OnlineText, StepMetrics, TextSource, TrainConfig, TrainData, Trainer,
};

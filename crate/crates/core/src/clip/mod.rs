//! The two-tower contrastive model: encoders, loss, training, fine-tuning and
//! weight interpolation.

mod loss;
mod model;
mod train;

pub use loss::{contrastive_loss, tower_backward, tower_forward, ContrastiveLoss};
pub use model::{
    interpolate_weights, zero_shot_classify, Prototypes, TwoTowerModel, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
    INIT_LOG_SCALE, MAX_LOG_SCALE, MIN_LOG_SCALE,
};
pub use train::{
    augment, caption_with_prototypes, finetune, save_log_csv, train_clip, train_from, write_log_csv, LogEntry,
    TrainConfig, TrainOutcome,
};

//! Losses, augmentation, freezing and the per-task training loop.

mod freeze;
mod losses;
mod mixup;
mod trainer;

pub use freeze::{apply_freeze_policy, FreezeMask, Phase};
pub use losses::{
    alpha_schedule, bce_classification_loss, divergence_loss, divergence_targets, kd_loss, kd_loss_softmax, one_hot,
    total_loss, KdKind, LossTerms, LAMBDA_DIV, PROB_CLAMP,
};
pub use mixup::{mix_pairs, mixup, sample_lambda, MixedBatch, MIXUP_ALPHA};
pub use trainer::{
    balanced_stream, finetune_balanced, train_task, TaskInputs, TaskReport, TeacherSnapshot, TrainOptions,
    TrainSchedule,
};

//! Losses, optimizer, gradient checking and the training loop.

pub mod adam;
pub mod gradcheck;
pub mod loss;
pub mod train;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use gradcheck::{finite_diff_check, BlockReport, GradCheckReport};
pub use loss::{lovasz_softmax, total_loss, weighted_ce, ClassWeights, LossReport, LossWeights};
pub use train::{evaluate, metrics_csv, predict_all, train_loop, EpochRecord, LabeledScene, TrainOptions, TrainOutcome};

//! Causal-LM pretraining, prompt/completion fine-tuning and binary
//! classification fine-tuning, all driven by Adam with a warmup/linear-decay
//! schedule.

mod adam;
mod classifier;
mod config;
mod data;
mod finetune;
mod loop_;
mod pretrain;

pub use adam::{adam_step, OptimizerState};
pub use classifier::{finetune_classifier, ClassifierModel, Classification, ClsExample};
pub use config::{lr_at, TrainConfig};
pub use data::{clm_pair, pack_sequences};
pub use finetune::{finetune_lm, render_lm_example, LmExample};
pub use loop_::{StepRecord, TrainingReport};
pub use pretrain::{clm_loss, pretrain, pretrain_blocks};

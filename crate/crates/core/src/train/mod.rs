//! Data handling, the training loop, checkpoints, prediction and synthetic data.

mod checkpoint;
mod config;
mod data;
mod predict;
mod synth;
mod trainer;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{best_checkpoint_path, InputMode, TrainConfig};
pub use data::{check_extents, mask_tensor, preprocess, split_dataset, BatchSampler, Dataset, Sample};
pub use predict::{overlay_image, predict, preprocess_to_gray, probability_image, Prediction};
pub use synth::{generate_synthetic, synthetic_pair};
pub use trainer::{predict_probs, train_from_config, EvalRecord, Event, StepRecord, TrainOutcome, Trainer};

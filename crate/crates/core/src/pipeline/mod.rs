//! Pixel-to-pixel classification: sample splitting, patch sampling with
//! augmentation, training of the compact network, overlap inference and
//! accuracy metrics.

mod infer;
mod metrics;
mod sampling;
mod split;
mod train;

pub use infer::{coverage_counts, infer, overlap_average, window_origins, InferConfig, Prediction};
pub use metrics::{compute_metrics, MetricsReport};
pub use sampling::{crop, Batch, PatchSampler, Transform};
pub use split::{sample_split, Pixel, SampleSplit};
pub use train::{batch_loss, evaluate_split, train_compact, TrainConfig, TrainLogEntry, TrainedModel, ValPoint};

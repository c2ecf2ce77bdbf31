//! Training, evaluation and the source-view protocol, all in `f64`.

pub mod eval;
pub mod metrics;
pub mod protocol;
pub mod train;

pub use eval::{evaluate, evaluate_oracle, EvalReport, SetScore, ViewScore};
pub use metrics::{psnr, ssim};
pub use protocol::{rank_source_sets, sample_source_views, SourceSampling};
pub use train::{smooth, train, train_with, TrainConfig, TrainOutcome};

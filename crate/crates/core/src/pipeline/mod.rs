//! Training orchestration, inference and evaluation.

pub mod align;
pub mod batch;
pub mod config;
pub mod metrics;
pub mod model;
pub mod predict;
pub mod train;

pub use align::{umeyama_align, Similarity};
pub use config::{Ablation, ModelConfig, TrainConfig, CONFIG_VERSION};
pub use metrics::MetricsReport;
pub use model::{Model, Need, BACKBONE_GROUPS, GROUPS, HEAD_GROUPS};
pub use train::{train_stage1, train_stage2, StagePlan, Task, TrainLog};

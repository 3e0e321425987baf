//! Synthetic detection world and a small set-prediction detector.

pub mod loss;
pub mod model;
pub mod scene;
pub mod train;

pub use loss::{plan_supervision, total_loss, total_loss_with_plan, LossBreakdown, SupervisionPlan};
pub use model::{DetectorModel, ModelConfig, QueryMode, QuerySource};
pub use scene::{render_scene, Scene, SceneParams};
pub use train::{evaluate, train, train_with_progress, AssignmentMode, EpochRow, RunOutcome, RunRecord, RunSummary, TrainConfig, Trainer};

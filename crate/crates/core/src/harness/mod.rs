//! Offline training, evaluation and the experiment runners.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod experiments;
pub mod metrics;
pub mod train;

pub use config::{DataConfig, EvalConfig, GoalKind, TrainConfig};
pub use dataset::{collect_dataset, Episode, Explorer, ReplayDataset};
pub use eval::{evaluate_agent, evaluate_bundle, evaluate_grid, goal_grid, AgentBundle, GoalAgent, GridResult, LearnedAgent, OracleAgent, StationaryAgent};
pub use metrics::{spearman, MetricsRow};
pub use train::{grid_rows, train_offline, GridRow, RunSummary, TrainOutcome};

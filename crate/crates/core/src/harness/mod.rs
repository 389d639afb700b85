//! Experiment orchestration: configuration, data collection, training,
//! adaptation, the latent-inference demo, metrics and checkpoints.

pub mod buffer;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod run;
pub mod toy;

pub use buffer::{ReplayBuffer, TransitionRecord};
pub use checkpoint::{Checkpoint, ModelSet, CHECKPOINT_VERSION};
pub use config::{ExperimentConfig, Mode};
pub use metrics::{bootstrap_ci, read_metrics, summarize, write_metrics, write_summary, MetricsRow, SummaryRow};
pub use run::{run_adaptation_eval, run_training, EvalOutput, TrainOutput};
pub use toy::{run_toy_demo, ToyConfig, ToyOutput};

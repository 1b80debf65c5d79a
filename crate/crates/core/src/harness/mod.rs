//! Experiment driver: synthetic tasks, training, metrics, reports and
//! checkpoints.

pub mod checkpoint;
pub mod config;
pub mod gates;
pub mod grid;
pub mod metrics;
pub mod report;
pub mod stream;
pub mod tasks;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::ExperimentConfig;
pub use gates::{gate_distribution, SiteGates};
pub use grid::{grid_cells, run_grid, GridCell};
pub use metrics::MetricsReport;
pub use report::emit_report;
pub use stream::{run_stream, run_stream_outcome, RunOutcome};
pub use tasks::{generate_task, Dataset, TaskData, TaskSpec, TaskStream};
pub use train::{evaluate, train_task, TrainConfig};

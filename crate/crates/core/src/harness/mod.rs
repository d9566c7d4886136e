//! Configuration, persistence, cost accounting, and the run driver.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod diagnostics;
pub mod metrics;
pub mod run;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, read_checkpoint_meta, write_checkpoint,
    CheckpointError, CheckpointMeta, RngState,
};
pub use config::{EngineKind, RunConfig};
pub use cost::{report_cost, CostReport};
pub use metrics::{metrics_csv, write_metrics, MetricRow, METRICS_HEADER};

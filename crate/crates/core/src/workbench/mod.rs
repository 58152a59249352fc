//! Synthetic data, persistence (config, checkpoints, metrics, images), plots and
//! experiment composition used by the command-line tool.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod metrics;
pub mod output;
pub mod plot;

pub use checkpoint::{Checkpoint, Container, Tensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ConfigMap, ExperimentConfig};
pub use dataset::{make_dataset, ClassParams, Dataset, Family, SyntheticDatasetSpec};
pub use experiment::{
    batch_indices, sampling_ablation, sf_ablation, train_loop, Tokenizer, Workspace, ABLATION_CFG,
};
pub use metrics::{read_csv, MetricsRow, MetricsSink};
pub use output::{encode_netpbm, token_dump, write_netpbm, DirLock};
pub use plot::{chart_from_csv, line_chart, Axes, Series};

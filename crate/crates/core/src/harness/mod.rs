//! Experiment harness: synthetic data, ground truth, metrics, CSV IO and
//! TOML experiment configs.

pub mod config;
pub mod data;
pub mod experiment;
pub mod io;
pub mod metrics;

pub use config::{CsvConfig, DataSpec, ExperimentConfig, ModelSpec, NetworkSpec, NodeGroup, SyntheticConfig};
pub use data::{generate_synthetic, ground_truth_posterior, partition_to_nodes, LabeledDataset, PartitionPolicy, SyntheticSpec};
pub use experiment::{evaluate, prepare, run_algorithms, run_experiment, write_outputs, AlgoResult, Evaluation, Prepared, StageSeeds};
pub use io::{load_csv_dataset, write_csv, TRACE_HEADER};
pub use metrics::{align_to_truth, clustering_accuracy, hungarian, mean_kl_cost, node_costs};

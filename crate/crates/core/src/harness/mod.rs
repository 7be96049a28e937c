//! Data, configuration, training, evaluation and report emission.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod probe;
pub mod report;
pub mod train;

pub use config::{ExperimentConfig, ProbeConfig};
pub use dataset::{
    label_split, load_cifar10, parse_cifar10, synth_dataset, DataSource, Dataset, DatasetSpec,
    SynthSpec,
};
pub use experiment::{
    ablate_batch, ablate_views, evaluate_checkpoint, probe_checkpoint, run_experiment, RunReport,
};
pub use probe::{linear_probe, ProbeResult};
pub use report::TableRow;
pub use train::{pretrain, TrainReport};

/// Fork labels of the root seed, one per consumer.
pub(crate) mod streams {
    pub const INIT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const QUEUE: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const VIEWS: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const METRICS: u64 = 7;
}

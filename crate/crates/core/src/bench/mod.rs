//! Desk-scale benchmark: synthetic datasets, few-shot / base-to-new /
//! domain-shift protocols, and versioned CSV + JSON metrics.

mod dataset;
mod metrics;
mod probe;
mod protocol;

pub use dataset::{corrupt, generate_dataset, sample_few_shot, Corruption, DatasetSpec, LabeledImage, Split, SyntheticDataset};
pub use metrics::{
    aggregate, format_aggregates, harmonic_mean, percent, read_csv, round2, write_csv, Aggregate, ConfigEcho, CsvRow,
    MetricsReport, SeedResult, Stat, SCHEMA_VERSION,
};
pub use probe::linear_probe_accuracy;
pub use protocol::{
    base_new_split, evaluate, run_protocol, train, Method, MethodConfig, SplitPlan, SplitRule, TrainingBudget, SHOT_CHOICES,
};

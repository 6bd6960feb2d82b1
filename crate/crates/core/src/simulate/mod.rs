//! Data generators, the Monte Carlo experiment driver and file formats.

pub mod experiment;
pub mod io;
pub mod truth;

pub use experiment::{
    rate_slope, run_experiment, EstimatorKind, ExperimentConfig, FitMode, FixedFit, KSchedule, ResultRow,
    ResultTable,
};
pub use io::{parse_experiment_config, read_dataset, resolve_output, run_oracle, write_dataset, Dataset, DatasetDomain};
pub use truth::{generate_dataset, ContinuousTruth, SmoothnessSpec, Truth};

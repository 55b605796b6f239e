//! Optimisation, evaluation, synthetic data and saliency.

pub mod dataset;
pub mod gradcam;
pub mod metrics;
pub mod optim;
pub mod schedule;
pub mod splits;
pub mod synth;
pub mod trainer;

pub use metrics::EvalReport;
pub use synth::{synth_dataset, Sample, SyntheticSpec};
pub use trainer::{evaluate, predict, train, EpochLog, TrainOutcome};

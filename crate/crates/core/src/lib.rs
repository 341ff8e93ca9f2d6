//! Class-incremental learning with rehearsal memory and distilled robust
//! samples, on a small dense residual network with hand-written gradients.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod array;
pub mod distill;
pub mod error;
pub mod gradnet;
pub mod memory;
pub mod metrics;
pub mod netpbm;
pub mod protocols;
pub mod rng;
pub mod trainer;

pub use array::Array;
pub use distill::{DistillConfig, RobustSample};
pub use error::{Error, Result};
pub use gradnet::{Layout, Network};
pub use memory::{Budget, RehearsalMemory};
pub use metrics::{aca, accuracy, AccuracyMatrix};
pub use protocols::{DatasetSplits, LabeledDataset, Sample, Split, TaskSequence};
pub use trainer::{run_experiment, ExperimentConfig, ExperimentOutcome, Strategy, TrainConfig};

//! Zero-shot learning with a hubness-reducing training objective.
//!
//! A small MLP projects class semantic vectors into visual feature space.
//! Training combines a supervised distance loss with a penalty on the
//! skewness of the per-batch class prediction histogram.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod calibration;
pub mod dataio;
pub mod error;
pub mod hubness;
pub mod inference;
pub mod kernels;
pub mod losses;
pub mod projector;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use calibration::{CvReport, CvSpec};
pub use dataio::{EmbeddingTable, FeatureBank, SplitManifest, SynthSpec, SyntheticData};
pub use error::{Error, Result};
pub use hubness::{HubnessReport, Metric, OccurrenceDistribution};
pub use inference::{ClassPrototypes, EvalReport};
pub use kernels::Matrix;
pub use losses::{BatchHistogram, Direction, SkewnessForm, TrainConfig};
pub use projector::{AdamState, MlpWeights};
pub use trainer::{EpochLog, TrainRun};

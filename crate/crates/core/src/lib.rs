//! kNN-based uncertainty estimation.
//!
//! Classifier logits are rescaled by a positive per-example weight built from
//! the distances to the nearest stored training representations and from how
//! many of those neighbors share the predicted label. The crate also carries
//! the density-based baselines, an embedded exact/approximate neighbor search
//! engine, a box-constrained quasi-Newton fitter and the calibration,
//! selective-prediction and out-of-distribution metrics used to evaluate them.

pub mod ann;
pub mod calibration;
mod codec;
pub mod datastore;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod seed;

pub use ann::{AnnIndex, IndexConfig, IndexKind, Neighborhood};
pub use calibration::{FittedCalibrator, KnnUeParams, Method};
pub use datastore::{Datastore, EvalRecord, EvalSet, SynthSpec};
pub use error::{CalibrationError, DataError, IndexError, MetricsError, OptimError, PipelineError};
pub use metrics::{MetricsReport, ScoredPrediction};

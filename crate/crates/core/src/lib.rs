//! Source-free domain adaptation for regression models.
//!
//! A dropout regressor trained on a source domain is adapted to unlabeled
//! target data: MC-dropout splits target predictions into confident and
//! uncertain sets, the confident set yields an estimate of the target label
//! density, and that density turns uncertain predictions into weighted
//! pseudo-labels for fine-tuning.
//!
//! Numeric types are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod calibration;
pub mod dataio;
pub mod density;
pub mod distribution;
pub mod error;
pub mod pipeline;
pub mod pseudolabel;
pub mod regressor;
pub mod rng;
pub mod scalar;

pub use calibration::{
    classify, compute_threshold, compute_thresholds, fit_error_model, ConfidenceThreshold, ErrorModel, SplitSets,
};
pub use dataio::{gen_scenario, load_csv, load_csv_with, split_by_predicate, Dataset, ScenarioSpec, SplitRule, Standardizer};
pub use density::{build_map, build_reference_map, map_mae, GridSpec, LabelDensityMap};
pub use distribution::{cell_mass, ErrorKernel};
pub use error::{Error, Result};
pub use pipeline::{
    adapt, baseline_naive_selftrain, early_stop_check, evaluate, sweep, train_source, AdaptOutput, AdaptationConfig,
    Metrics, RunReport, SourceTrainConfig,
};
pub use pseudolabel::{generate, generate_all, PseudoLabel, PseudoLabelGenerator};
pub use regressor::{Activation, Gradients, LossKind, Regressor, TrainConfig, TrainingBatch, UncertainPrediction};
pub use scalar::Scalar;

pub type Regressor64 = Regressor<f64>;
pub type Regressor32 = Regressor<f32>;
pub type Dataset64 = Dataset<f64>;
pub type Dataset32 = Dataset<f32>;
pub type LabelDensityMap64 = LabelDensityMap<f64>;
pub type LabelDensityMap32 = LabelDensityMap<f32>;
pub type ErrorModel64 = ErrorModel<f64>;
pub type ErrorModel32 = ErrorModel<f32>;
pub type PseudoLabel64 = PseudoLabel<f64>;
pub type PseudoLabel32 = PseudoLabel<f32>;

//! Scores how hard each training sample is to unlearn from a classifier using
//! Stein-kernel similarity under the model, and checks the rankings by actually
//! unlearning samples and measuring the outcome.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common `f64` instantiations.

pub mod data;
pub mod diffnet;
pub mod error;
pub mod eval;
pub mod scalar;
pub mod scoring;
pub mod stein;
pub mod unlearn;

pub use data::{LabeledDataset, SplitPlan, Subset};
pub use diffnet::{Activation, ForwardTrace, MlpModel, NetworkSpec, SgdConfig};
pub use error::{Error, Result};
pub use eval::{EvalSplits, MiaCalibration, UnlearnReport};
pub use scalar::Scalar;
pub use scoring::{DifficultyRanking, Metric, Orientation, ScoringOptions, Standardization};
pub use stein::{KsdMode, ScoreTable, SteinKernelMatrix};
pub use unlearn::{Method, UnlearnConfig, UnlearnOutcome};

pub type Dataset64 = LabeledDataset<f64>;
pub type Dataset32 = LabeledDataset<f32>;
pub type MlpModel64 = MlpModel<f64>;
pub type MlpModel32 = MlpModel<f32>;
pub type ScoreTable64 = ScoreTable<f64>;
pub type ScoreTable32 = ScoreTable<f32>;
pub type SteinKernelMatrix64 = SteinKernelMatrix<f64>;
pub type SteinKernelMatrix32 = SteinKernelMatrix<f32>;
pub type DifficultyRanking64 = DifficultyRanking<f64>;
pub type DifficultyRanking32 = DifficultyRanking<f32>;
pub type UnlearnOutcome64 = UnlearnOutcome<f64>;
pub type UnlearnReport64 = UnlearnReport<f64>;

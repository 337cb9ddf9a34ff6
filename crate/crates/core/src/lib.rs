//! Normalizing-flow density estimation for single-class feasibility
//! detection: Real-NVP coupling flows, a resampled Gaussian base, maximum
//! likelihood training, threshold selection and ranking metrics, plus a
//! one-class SVM baseline.

pub mod adam;
pub mod base;
pub mod checkpoint;
pub mod coupling;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod linalg;
pub mod nn;
pub mod ocsvm;
pub mod rng;
pub mod synth;
pub mod train;

pub use adam::{AdamConfig, AdamState};
pub use base::{BaseDistribution, BaseKind, ResamplingBase, ResamplingConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use coupling::CouplingLayer;
pub use data::{Label, LabeledDataset, Splits};
pub use error::{Error, ErrorCategory, Result};
pub use eval::{RocResult, ScoreReport, ScoreRow, Verdict};
pub use flow::{FlowConfig, FlowModel, LogDensityResult};
pub use nn::{Activation, DenseNet};
pub use ocsvm::{OcSvmConfig, OcSvmModel};
pub use synth::{SynthBenchmark, SynthSpec};
pub use train::{TrainConfig, TrainReport};

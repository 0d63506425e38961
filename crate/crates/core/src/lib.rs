//! Conditional normalizing flows for statistical downscaling of gridded
//! scalar fields.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. File formats, field synthesis and the command line live in the
//! `flowscale` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod field;
pub mod flow;
pub mod gradcheck;
pub mod graph;
pub mod math;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use data::{build_dataset, downsample_avg, Dataset, DatasetSplit, NormStats, PairedSample, SplitKind};
pub use error::{Error, Result};
pub use eval::{MetricsReport, Predictor, SampleOutcome, Summary};
pub use field::{GridField, ValueRange};
pub use flow::{ActNorm, AffineCoupling, FlowStack, FlowStep, StepKind};
pub use graph::{Elementwise, Graph, Reduce, Var};
pub use model::{DensityFlow, FlowModel, LatentState, ModelConfig};
pub use params::{Bound, ParamId, ParamSet};
pub use tensor::Tensor;
pub use train::{fit, resume, EmaState, LogRecord, OptimizerState, TrainConfig, Trainer, TrainingLog};

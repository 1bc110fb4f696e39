//! Self-supervised representation learning lab: a small reverse-mode autodiff
//! engine, encoder/predictor networks with an EMA target, the BYOL, BYOL' and
//! RAFT objectives, training and evaluation loops, and numerical checks of
//! the relations between the objectives.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod seed;
pub mod train;
pub mod verify;

pub use autodiff::{Graph, OptimizerKind, Tensor, Var};
pub use data::{AugmentationSpec, BlobsSpec, DataSource, Dataset, PositiveBatch};
pub use error::{Error, Result};
pub use eval::{EvalReport, ProbeConfig};
pub use losses::{LossConfig, Objective, TangentialMode};
pub use model::{ModelParams, NetworkSpec, NormGradient, PredictorKind};
pub use train::{MetricsRecord, Schedule, TrainConfig};

//! Gaussian-process regression on 3-way tensor covariates with a learned,
//! TV-regularized spatial contraction and a separable multi-linear kernel.

pub mod error;
pub mod gp;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod predict;
pub mod sim;
pub mod tensor;
pub mod tv;

pub use error::{Error, Result};
pub use gp::{Block, BlockGradient, ContractionFactors, Dataset, KernelFactors, ModelParams};
pub use optim::{FitConfig, FitReport};
pub use predict::{ExplainedVariation, PredictiveDistribution};
pub use tensor::{Matrix, Mode, Tensor3};

//! Density-map counting of corn kernels.
//!
//! The crate covers the whole pipeline from point annotations to yield
//! estimates:
//!
//! - [`dataio`]: annotation, density-map and manifest formats.
//! - [`densitymap`]: geometry-adaptive Gaussian ground truth, integration,
//!   thresholding.
//! - [`synthgen`]: procedurally rendered ears with exact annotations.
//! - [`augment`]: pyramids, patch crops and noise.
//! - [`model`]: the multi-scale fusion counting network.
//! - [`train`]: Euclidean loss, Adam, schedules, checkpoints, histories.
//! - [`ssl`]: noisy-student pseudo-labelling and mixed batches.
//! - [`evaluate`]: MAE/RMSE/MAPE and miss-count accounting.
//! - [`agronomy`]: ear-level estimates and yield.

pub mod agronomy;
pub mod augment;
pub mod config;
pub mod dataio;
pub mod densitymap;
pub mod error;
pub mod evaluate;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod ssl;
pub mod synthgen;
pub mod train;

pub use augment::Sample;
pub use densitymap::DensityMap;
pub use error::{Error, ErrorCategory, Result};
pub use raster::Image;

//! Bridge regression by Monte Carlo over the latent stable scale mixture,
//! with the prior scale tuned by Stein's unbiased risk estimate.

pub mod data;
pub mod error;
pub mod mcstats;
pub mod model;
pub mod nmeans;
pub mod orthogonal;
pub mod regression;
pub mod ridge;
pub mod sim;
pub mod sure;
pub mod tilted_stable;

pub use error::{BridgeError, Result};
pub use model::{fit, fit_dataset, FitConfig, FittedModel, Method};
pub use regression::NoiseModel;
pub use sure::{NuGrid, SurePath};
pub use tilted_stable::{LatentDraws, StableIndex, TiltedStableSampler};

//! Multi-domain image standardization.
//!
//! The crate bundles an adversarial multi-domain translation network whose
//! averaged style parameters map every domain into one shared radiometric
//! representation, the classical standardization baselines it is compared
//! against, and a segmentation harness measuring the downstream effect.

pub mod autograd;
pub mod baselines;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod imaging;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod segmentation;
pub mod standardizer;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

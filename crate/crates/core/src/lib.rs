//! Missing-data reconstruction for multi-band rasters with a two-input residual
//! CNN (corrupted image plus a spectral or temporal auxiliary image), along with
//! degradation simulators, classical baselines, training, and quality metrics.

pub mod baselines;
pub mod config;
pub mod conv;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod io;
pub mod masks;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Result, StsError};
pub use tensor::{Real, Shape, Tensor4};

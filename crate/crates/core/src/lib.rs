//! Multi-scale clustering and source separation of time series with wavelet
//! scattering covariances.

pub mod error;
pub mod diffcore;
pub mod filterbank;
pub mod fvae;
pub mod lbfgs;
pub mod pipeline;
pub mod scatcov;
pub mod scatgraph;
pub mod sourcesep;
pub mod spectral;
pub mod storage;
pub mod synthgen;
pub mod workers;

pub use error::{Error, Result};

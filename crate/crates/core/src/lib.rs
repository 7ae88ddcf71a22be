//! Continuous-time state-space forecasting.
//!
//! A causal running-statistics normalizer feeds a stack of diagonal S5
//! layers; the final encoder outputs are read as coefficients of an
//! orthonormal function basis, which is sampled at whatever step size the
//! task needs. The same parameters serve any sampling rate through the
//! runtime scale factor `s_Δ` that multiplies every learned step size.

pub mod autodiff;
pub mod basis;
pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod error;
pub mod eval;
pub mod forecast;
pub mod gradcheck;
pub mod model;
pub mod norm;
pub mod par;
pub mod scan;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Mat;

//! Two-step spatial GEE estimation for count and binary responses.
//!
//! The first step fits a pooled quasi-MLE and estimates the spatial
//! nuisance parameters from its residuals; the second step solves the
//! group-wise quasi-score equations with the plug-in working covariance and
//! reports a spatial-HAC sandwich variance.

pub mod data;
pub mod error;
pub mod family;
pub mod gee;
pub mod kernel;
pub mod montecarlo;
pub mod pipeline;
pub mod pqmle;
pub mod sim;
pub mod special;
pub mod working;

pub use data::{Dataset, DistanceMetric, GroupIndex};
pub use error::{Error, Result};
pub use family::Family;

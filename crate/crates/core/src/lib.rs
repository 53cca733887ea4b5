//! Bayesian GEV regression for annual-maxima panels from multiple gauging
//! stations, with linear, P-spline and grouped-horseshoe P-spline predictors
//! on the linked GEV parameters.

pub mod cv;
pub mod density;
pub mod diagnostics;
pub mod error;
pub mod gev;
pub mod io;
pub mod model;
pub mod posterior;
pub mod run;
pub mod sampler;
pub mod splines;
pub mod stats;

pub use error::{Error, Result};

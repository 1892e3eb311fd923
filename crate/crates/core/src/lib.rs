//! Personalized vehicle energy prediction from sparse participatory-sensing
//! driving traces.
//!
//! A trace is cut into 1-km segments, each segment is reduced to a small set
//! of measurable features, and a per-(driver, vehicle) linear model maps
//! features to energy. Missing (driver, vehicle, segment) data points are
//! filled in by substituting features from similar drivers (speed-profile or
//! driving-habit matching), by matrix factorization, or from fleet averages
//! with a personal adjustment.

pub mod baseline_avg;
pub mod collab_filter;
pub mod dataset;
pub mod energy_model;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod predictor;
pub mod similarity;
pub mod synth_oracle;
pub mod trip_data;

pub use error::{Error, ErrorKind, Result};

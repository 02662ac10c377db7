//! Neural-operator forecasting of spatio-temporal fields.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

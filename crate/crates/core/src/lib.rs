//! End-to-end text image translation with auxiliary MT and OCR tasks.

pub mod cascade;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod raster;
pub mod synthesis;
pub mod tps;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};

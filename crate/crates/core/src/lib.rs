//! Hourly air-quality class annotation from weather, time and land-use context.

pub mod calib;
pub mod config;
pub mod domain;
pub mod error;
pub mod features;
pub mod eval;
pub mod ingest;
pub mod io;
pub mod lstm;
pub mod model;
pub mod pipeline;
pub mod rf;
pub mod service;
pub mod spatial;
pub mod synth;
pub mod weather;

pub use domain::{bin_aqi, AqiClass, Binned, Dataset, DeviceMeta, MetRecord, Sample};
pub use error::{Error, Result};

pub mod autodiff;
pub mod baseline;
pub mod battery;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod harness;
mod kv;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};

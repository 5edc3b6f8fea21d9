pub mod config;
pub mod discriminator;
pub mod error;
pub mod extractor;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scheduler;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};

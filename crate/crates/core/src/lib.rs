pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

//! Pinching-antenna channel simulation, pilot datasets, classical and neural
//! channel estimators, training and evaluation.

pub mod channel;
pub mod classical;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod model;
pub mod nn;
pub mod pamoe;
pub mod paformer;
pub mod pilots;
pub mod scene;
pub mod seed;
pub mod trainer;

pub use error::{FormatError, PassError, Result};

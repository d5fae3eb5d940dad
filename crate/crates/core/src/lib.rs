//! Continual class discovery over streams of frozen embedding vectors.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod math;
pub mod memory;
pub mod optim;
pub mod ot;
pub mod proto;
pub mod rng;
pub mod trainer;

pub use config::{CenterInit, MemoryStrategy, Profile, TrainConfig};
pub use error::{Error, Result};

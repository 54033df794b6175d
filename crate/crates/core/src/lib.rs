pub mod attention;
pub mod config;
pub mod error;
pub mod frame;
pub mod fusion;
pub mod io;
pub mod memory;
pub mod metrics;
pub mod pipeline;
pub mod postprocess;
pub mod propagation;
pub mod synthetic;

pub use error::{Result, VosError};

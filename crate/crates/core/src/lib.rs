pub mod cli;
pub mod config;
pub mod dbi;
pub mod engine;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod protocol;
pub mod signatures;
pub mod workload;

pub use config::SimConfig;
pub use engine::{run, simulate, RunOutput};
pub use error::{Error, Result};

pub mod config;
pub mod continuous;
pub mod error;
pub mod exploration;
pub mod grid;
pub mod grid_policy;
pub mod harness;
pub mod local_search;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod sde_policy;
pub mod teacher;

pub use error::{Error, Result};

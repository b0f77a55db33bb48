pub mod blob;
pub mod cli;
pub mod error;
pub mod grad;
pub mod policy;
pub mod model;
pub mod scheduler;
pub mod seed;
pub mod simenv;
pub mod trackspace;
pub mod training;

pub use error::{Error, Result};

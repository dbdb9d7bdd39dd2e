pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod evalsuite;
pub mod losses;
pub mod operators;
pub mod policy;
pub mod reward;
pub mod study;
pub mod trainer;

pub use error::{Error, Result};

pub mod cli;
pub mod embedding;
pub mod error;
pub mod fusion;
pub mod mae;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod oneshot;
pub mod synthdata;

pub use error::{Error, Result};

pub mod backbone;
pub mod chunk;
pub mod cli;
pub mod conformance;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod paw;
pub mod skipgate;
pub mod stats;
pub mod textdata;
pub mod training;

pub use error::{FbsError, Result};

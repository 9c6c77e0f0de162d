pub mod dataset;
pub mod engine;
pub mod error;
pub mod factors;
pub mod io;
pub mod learning;
pub mod lie;
pub mod noise;
pub mod sim;
pub mod sparse;

pub use error::{Error, Result};

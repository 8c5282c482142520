pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod seed;
pub mod synthcorpus;
pub mod text;
pub mod training;

pub use error::{Error, Result};

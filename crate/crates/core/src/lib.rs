pub mod checkpoint;
pub mod classifiers;
pub mod data;
pub mod encoder;
pub mod evaluation;
pub mod error;
pub mod fusion;
pub mod interpret;
pub mod model;
pub mod numerics;
pub mod span;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};

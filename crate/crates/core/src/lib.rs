pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod nn;
pub mod similarity;
pub mod splicing;
pub mod training;

pub use error::{Error, Result};

pub mod checkpoint;
pub mod coseg;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod par;
pub mod plot;
pub mod prior;
pub mod tensor;

pub use error::{Error, Result};

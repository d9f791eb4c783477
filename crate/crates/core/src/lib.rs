pub mod arm;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod excitation;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorCategory, Result};

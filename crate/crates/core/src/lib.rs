pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod generator;
pub mod guider;
pub mod layers;
pub mod tensor;
pub mod train;

pub use error::{Result, WegenError};

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fox;
pub mod geometry;
pub mod gsca;
pub mod losses;
pub mod mask;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};

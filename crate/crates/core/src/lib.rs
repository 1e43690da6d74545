pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod model;
pub mod pipeline;
pub mod prompts;
pub mod tokenizer;
pub mod toy;
pub mod vocab;

pub use error::{Error, Result};

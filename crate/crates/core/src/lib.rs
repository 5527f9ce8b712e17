pub mod align;
pub mod autodiff;
pub mod config;
pub mod container;
pub mod error;
pub mod eval;
pub mod model;
pub mod run;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Mat;

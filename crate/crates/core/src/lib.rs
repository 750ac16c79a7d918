//! Learning to obstruct: meta-learning a backbone initialization that makes
//! few-shot learners fail on a restricted set of classes.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod learners;
pub mod lto;
pub mod models;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

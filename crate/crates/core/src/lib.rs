//! Few-shot classification with learned property tokens.
//!
//! The pipeline clusters text descriptions of class properties, selects the
//! clusters that best match each class's support images, trains a small
//! cross-attention generator to emit one token per property, and classifies
//! queries with a pair of prototype caches over class and property tokens.

pub mod autodiff;
pub mod cache;
pub mod contrast;
pub mod datastore;
pub mod error;
pub mod gradcheck;
pub mod mpg;
pub mod optim;
pub mod propmine;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

//! Language and task adapters for small transformer encoders over a
//! synthetic code corpus: autodiff, model assembly, training, evaluation,
//! probing and parameter budgeting.

pub mod adapters;
pub mod assembly;
pub mod budget;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod heads;
pub mod params;
pub mod pipeline;
pub mod probe;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

pub mod autodiff;
pub mod cells;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objectives;

pub use error::{Error, Result};

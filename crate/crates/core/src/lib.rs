#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod model;
pub mod sampling;
pub mod seed;

pub use error::{Error, Result};

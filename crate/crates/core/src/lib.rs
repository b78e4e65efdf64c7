#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

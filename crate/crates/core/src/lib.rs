//! Object-centric video dialog: recurrent relational reasoning over object
//! lives across dialog turns, with a pointer-augmented answer decoder.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod r3;
pub mod search;
pub mod synthworld;
pub mod tensor;
pub mod training;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};

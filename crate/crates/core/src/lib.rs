#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod cfv;
pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod fv;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod prompts;
pub mod rng;
pub mod tensor;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

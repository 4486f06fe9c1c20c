#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod cues;
pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nets;
pub mod pipeline;
pub mod reward;

pub use error::{Error, Result};

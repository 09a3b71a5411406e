//! File formats, the multi-threaded training loop and the command-line
//! front end for the `tarnet_core` speaker-identification stack.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod inspect;
pub mod manifest;
pub mod trainer;
pub mod wav;

pub use error::{Error, Result};

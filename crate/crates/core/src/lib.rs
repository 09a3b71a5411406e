//! Multi-scale temporal speaker identification.
//!
//! This crate holds the numerical core: a dense `f64` tensor with a
//! define-by-run reverse-mode tape, the log-Mel front-end, the residual
//! dilated TCN blocks, the three-stage encoder with channel fusion,
//! attentive statistics pooling, the assembled classifier, synthetic speaker
//! data, SGD pieces and the evaluation metrics.
//!
//! It is `no_std` and only needs `alloc`. File formats, the CLI and the
//! multi-threaded training loop live in the `tarnet` crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod blocks;
pub mod data;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pooling;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{Tape, Tensor, Var};

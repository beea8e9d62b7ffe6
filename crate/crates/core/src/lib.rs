//! Core of the attention-enforced nuclei segmentation pipeline.
//!
//! Everything in this crate is pure computation over in-memory buffers: a small
//! dense tensor engine with analytic backward passes, the spatial and channel
//! attention modules, the full segmentation network with its optimizer and
//! schedule, image preprocessing, patch/multi-scale inference, marker-controlled
//! watershed post-processing and pixel metrics. File formats, decoding and the
//! command line live in the `aenet` crate.

#![no_std]
#![deny(unused_must_use)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod watershed;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

//! File formats, dataset handling and the batch commands of the `aenet`
//! binary.

pub mod annotations;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod synth;
pub mod training;

//! File formats, image IO and the command line around [`mamp_core`].
//!
//! - [`flo`]: Middlebury `.flo` optical flow files.
//! - [`checkpoint`]: encoder weights.
//! - [`io`]: RGB frames and indexed masks as PNG.
//! - [`config`]: `key=value` training configuration files.
//! - [`cli`]: the `mamp` executable.

#![warn(rust_2018_idioms)]

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod flo;
pub mod io;

pub use error::{Error, Result};

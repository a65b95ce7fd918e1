//! Motion-aware mask propagation for semi-supervised video object segmentation.
//!
//! The crate is split along the data flow of the method:
//!
//! - [`raster`], [`color`] and [`resample`] hold the dense containers and the
//!   geometric/color primitives everything else consumes.
//! - [`encoder`] is the strided residual feature extractor, with a reverse-mode
//!   pass used by [`train`].
//! - [`matching`] is the windowed affinity kernel, top-K filtering, label
//!   propagation and the flow-warped (motion-aware) composition over several
//!   reference frames.
//! - [`alignment`], [`flow`] and [`memory`] supply the inputs of the matcher:
//!   stride-aligned supervision signals, per-reference optical flow and the
//!   long-/short-term memory schedule.
//! - [`pipeline`] runs sequential inference over a video and [`metrics`] scores
//!   the result.
//!
//! Everything here is `no_std` + `alloc`. File formats and the command line
//! live in the `mamp` crate.

#![cfg_attr(not(test), no_std)]
#![warn(rust_2018_idioms, unused_qualifications)]

extern crate alloc;

pub mod alignment;
pub mod color;
pub mod encoder;
mod error;
pub mod flow;
pub mod matching;
pub mod memory;
pub mod metrics;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
mod par;
pub mod pipeline;
pub mod raster;
pub mod resample;
pub mod train;

pub use error::{Error, Result};
pub use raster::{ColorSpace, FlowField, Image, IndexedMask, Raster};

//! lumo-core: a parameter-budgeted low-light image enhancement toolkit.
//!
//! The crate provides the pieces a sub-megabyte enhancement pipeline is
//! made of, each behind an exact numeric contract:
//!
//! - [`colorspace`]: invertible luminance/chrominance decompositions (HVI
//!   with intensity collapse, YUV, LAB, grayscale, virtual exposures).
//! - [`classical`]: non-learned enhancement primitives (histogram
//!   equalization, CLAHE, pixel-wise gamma, exposure fusion).
//! - [`autodiff`]: a small reverse-mode tape over `ndarray` used by the
//!   blocks, losses and the training loop.
//! - [`blocks`]: lightweight differentiable building blocks (depthwise
//!   separable and partial convolutions, channel/cross attention, gates,
//!   multi-branch convolutions, phase transfer).
//! - [`reparam`]: normalization folding and branch merging with verified
//!   forward equivalence.
//! - [`graph`] / [`zoo`]: a declarative block-graph model description, four
//!   reference sub-megabyte models, parameter accounting and budget audits.
//! - [`losses`]: the composite loss menu with verified gradients.
//! - [`metrics`] / [`rank`]: full-reference metrics, pluggable no-reference
//!   backends and the leaderboard rank-aggregation protocol.
//! - [`data`], [`train`], [`tiling`], [`checkpoint`], [`config`]: dataset
//!   ingestion, the training loop, tiled high-resolution inference and
//!   checkpoint persistence.

pub mod autodiff;
pub mod blocks;
pub mod classical;
pub mod colorspace;
pub mod error;
pub mod graph;
pub mod zoo;
pub mod reparam;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod rank;

pub use error::{Error, Result};
pub use image::{ImageTensor, ValueRange};

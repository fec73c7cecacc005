//! Multi-scale deformable attention (MSDA) kernels for CPUs with a cache
//! hierarchy.
//!
//! The crate has four parts:
//!
//! - [`tensor`], [`pyramid`], [`io`]: dense tensor containers, feature-pyramid
//!   geometry with channel-last / pixel-last / padded layouts, and the XMSD
//!   binary tensor format.
//! - [`reference`] + [`gradcheck`]: a slow, obviously-correct forward and
//!   backward pass, plus a finite-difference gradient checker. This is the
//!   oracle.
//! - [`optimized`]: tiled, multi-threaded forward and backward kernels with
//!   each memory-access optimization (pixel-last layout, merged-pair gather
//!   over a padded stride, adaptive chunk lengths, merged scatter write-out,
//!   staggered write scheduling) behind an independent toggle.
//! - [`membench`]: gather/scatter microbenchmarks over access granularity,
//!   working-set size and writer contention.

pub mod fixtures;
pub mod gradcheck;
pub mod io;
pub mod membench;
pub mod optimized;
pub mod pyramid;
pub mod reference;
pub mod tensor;

pub use pyramid::{FeaturePyramid, Layout, LevelSpec, SamplingTensors};
pub use reference::{Mode, MsdaConfig, MsdaGrads, SavedForward};
pub use tensor::{Dtype, Tensor};

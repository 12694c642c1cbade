//! Sparse depth completion by spatial propagation.
//!
//! Sparse depth observations are spread over an image grid by iterating a
//! normalized, image-guided affinity kernel. The kernel can be dilated and the
//! iteration can run coarse-to-fine over an image pyramid, which lets depth
//! reach large unsampled regions in few iterations.
//!
//! The crate also contains what is needed to exercise that engine end to end:
//! sparse samplers, a hand-crafted affinity provider, pinhole geometry with
//! multi-view fusion, evaluation metrics and a synthetic scene renderer with
//! analytic ground truth.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affinity;
pub mod error;
pub mod geometry;
pub mod grids;
pub mod metrics;
pub mod propagation;
pub mod pyramid;
pub mod sampling;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result};
pub use grids::{ColorGrid, ConfidenceGrid, DepthGrid, Grid2D, NormalGrid};

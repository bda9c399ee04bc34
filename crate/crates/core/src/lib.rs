//! LiDAR novel-view synthesis with a neural field of 2D Gaussian splats.
//!
//! Scans are handled as range images ([`rangeview`]); a [`field::Scene`] of
//! anchors and attribute networks is decoded per pose and rendered by the
//! differentiable [`rasterizer`], trained by [`optimizer`], and refined on
//! generated off-trajectory scans by [`expansion`].

pub mod error;
pub mod expansion;
pub mod field;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod mlp;
pub mod optimizer;
pub mod rangeview;
pub mod rasterizer;
pub mod spatial;
pub mod ssim;
pub mod synth;

pub use error::{Error, Result};

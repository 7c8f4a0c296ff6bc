//! Deterministic building blocks of an anchor-based mitosis detection
//! pipeline: stain normalization, tiling, weak-label mask synthesis,
//! detection geometry, loss mathematics with gradient checks, and the
//! centroid-matching scoring protocol.
//!
//! The trained detector itself is not part of this crate. Detections enter
//! through the JSON interface in [`evaluation`] and [`pipeline`].

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotation;
pub mod evaluation;
pub mod geometry;
pub mod imaging;
pub mod losses;
pub mod pipeline;
pub mod tiling;

pub use annotation::{CentroidLabel, GroundTruthObject, Mask, MaskShape};
pub use evaluation::{Detection, MatchResult, Metrics};
pub use geometry::{Anchor, BoundingBox, RpnTarget};
pub use imaging::{OdImage, RasterImage, StainProfile};
pub use tiling::{TilePlan, TileRef};

/// A point in continuous pixel coordinates (x = column, y = row).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

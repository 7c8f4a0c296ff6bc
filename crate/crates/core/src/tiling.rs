//! Sliding-window tiling with overlap, horizontal-flip augmentation, and the
//! tile ↔ slide coordinate mapping used to bring detections back to slide
//! space.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::Detection;
use crate::geometry::confidence_order;
use crate::imaging::RasterImage;
use crate::Point;

pub const DEFAULT_TILE_SIZE: u32 = 512;
pub const DEFAULT_OVERLAP: f64 = 0.6;
pub const MIN_TILE_SIZE: u32 = 32;
pub const MAX_OVERLAP: f64 = 0.95;
/// Cross-tile duplicate radius, in pixels.
pub const DEFAULT_DEDUP_RADIUS: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TilingError {
    #[error("invalid tiling: {0}")]
    InvalidTiling(String),
    #[error("tile reference {index} does not belong to the plan")]
    UnknownTile { index: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub slide_width: u32,
    pub slide_height: u32,
    pub tile_size: u32,
    pub stride: u32,
    /// Top-left corners `(x, y)`, sorted lexicographically.
    pub origins: Vec<(u32, u32)>,
    /// Per origin: the tile extends past the slide border.
    #[serde(skip)]
    pub padded: Vec<bool>,
}

/// Window positions along one axis.
fn axis_origins(dim: u32, tile: u32, stride: u32) -> Vec<u32> {
    if dim <= tile {
        return vec![0];
    }
    let last = dim - tile;
    let mut out: Vec<u32> = (0..=last).step_by(stride as usize).collect();
    if *out.last().expect("starts at 0") != last {
        out.push(last);
    }
    out
}

/// `floor(tile_size · (1 − overlap))`, never below 1.
pub fn stride_for(tile_size: u32, overlap: f64) -> u32 {
    // the epsilon keeps e.g. 0.5 · 100 from flooring to 49
    ((f64::from(tile_size) * (1.0 - overlap) + 1e-9).floor() as u32).max(1)
}

pub fn plan_tiles(
    slide_width: u32,
    slide_height: u32,
    tile_size: u32,
    overlap: f64,
) -> Result<TilePlan, TilingError> {
    if slide_width == 0 || slide_height == 0 {
        return Err(TilingError::InvalidTiling(format!(
            "slide dimensions {slide_width}x{slide_height} must be positive"
        )));
    }
    if tile_size < MIN_TILE_SIZE {
        return Err(TilingError::InvalidTiling(format!(
            "tile size {tile_size} below {MIN_TILE_SIZE}"
        )));
    }
    if !(0.0..=MAX_OVERLAP).contains(&overlap) {
        return Err(TilingError::InvalidTiling(format!(
            "overlap {overlap} outside [0, {MAX_OVERLAP}]"
        )));
    }
    let stride = stride_for(tile_size, overlap);
    let xs = axis_origins(slide_width, tile_size, stride);
    let ys = axis_origins(slide_height, tile_size, stride);
    let mut origins = Vec::with_capacity(xs.len() * ys.len());
    for &x in &xs {
        for &y in &ys {
            origins.push((x, y));
        }
    }
    let padded = origins
        .iter()
        .map(|&(x, y)| x + tile_size > slide_width || y + tile_size > slide_height)
        .collect();
    Ok(TilePlan {
        slide_width,
        slide_height,
        tile_size,
        stride,
        origins,
        padded,
    })
}

impl TilePlan {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Reference to tile `index`.
    pub fn tile(&self, index: usize, flipped: bool) -> Result<TileRef, TilingError> {
        let origin = *self
            .origins
            .get(index)
            .ok_or(TilingError::UnknownTile { index })?;
        Ok(TileRef {
            index,
            origin,
            flipped,
        })
    }

    pub fn tiles(&self, flipped: bool) -> impl Iterator<Item = TileRef> + '_ {
        self.origins.iter().enumerate().map(move |(index, &origin)| TileRef {
            index,
            origin,
            flipped,
        })
    }

    /// Restores `padded` after deserialization.
    pub fn recompute_padding(&mut self) {
        self.padded = self
            .origins
            .iter()
            .map(|&(x, y)| {
                x + self.tile_size > self.slide_width || y + self.tile_size > self.slide_height
            })
            .collect();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRef {
    pub index: usize,
    pub origin: (u32, u32),
    pub flipped: bool,
}

/// Copies the `tile_size²` window at `tile.origin`. Area beyond the slide is
/// zero; flipped tiles have their columns reversed.
pub fn extract_tile(image: &RasterImage, tile: &TileRef, tile_size: u32) -> RasterImage {
    let (ox, oy) = tile.origin;
    let ts = tile_size as usize;
    let mut pixels = vec![0u8; ts * ts * 3];
    let src = image.as_bytes();
    let iw = image.width() as usize;
    let copy_w = image.width().saturating_sub(ox).min(tile_size) as usize;
    let copy_h = image.height().saturating_sub(oy).min(tile_size) as usize;
    for row in 0..copy_h {
        let src_start = ((oy as usize + row) * iw + ox as usize) * 3;
        let src_row = &src[src_start..src_start + copy_w * 3];
        let dst_row = &mut pixels[row * ts * 3..(row + 1) * ts * 3];
        if tile.flipped {
            for (c, px) in src_row.chunks_exact(3).enumerate() {
                let d = (ts - 1 - c) * 3;
                dst_row[d..d + 3].copy_from_slice(px);
            }
        } else {
            dst_row[..copy_w * 3].copy_from_slice(src_row);
        }
    }
    RasterImage::new(tile_size, tile_size, pixels).expect("buffer sized for tile")
}

/// Tile-local point to slide coordinates. Flipped tiles mirror with the
/// pixel-index convention `x ↦ tile_size − 1 − x`.
pub fn map_local_to_slide(tile: &TileRef, local: Point, tile_size: u32) -> Point {
    let (ox, oy) = (f64::from(tile.origin.0), f64::from(tile.origin.1));
    let lx = if tile.flipped {
        f64::from(tile_size) - 1.0 - local.x
    } else {
        local.x
    };
    Point::new(ox + lx, oy + local.y)
}

/// Inverse of [`map_local_to_slide`].
pub fn map_slide_to_local(tile: &TileRef, global: Point, tile_size: u32) -> Point {
    let (ox, oy) = (f64::from(tile.origin.0), f64::from(tile.origin.1));
    let lx = global.x - ox;
    let lx = if tile.flipped {
        f64::from(tile_size) - 1.0 - lx
    } else {
        lx
    };
    Point::new(lx, global.y - oy)
}

/// Maps tile-local detections (boxes included) into slide coordinates.
pub fn detections_to_slide(tile: &TileRef, local: &[Detection], tile_size: u32) -> Vec<Detection> {
    local
        .iter()
        // a mirrored box is its translate centered on the mirrored centroid
        .map(|d| d.relocated(map_local_to_slide(tile, d.centroid(), tile_size)))
        .collect()
}

/// Greedy confidence-descending deduplication: a detection is kept iff it
/// lies at least `dedup_radius` from every detection kept before it. The
/// output is sorted by confidence descending (input order on ties).
pub fn merge_tile_detections(detections: &[Detection], dedup_radius: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in confidence_order(detections.iter().map(Detection::confidence)) {
        let c = detections[i].centroid();
        if kept.iter().all(|k| k.centroid().distance(&c) >= dedup_radius) {
            kept.push(detections[i]);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aperio_slide_plan() {
        let plan = plan_tiles(2000, 2000, 512, 0.6).unwrap();
        assert_eq!(plan.stride, 204);
        let xs: Vec<u32> = plan.origins.iter().filter(|o| o.1 == 0).map(|o| o.0).collect();
        assert_eq!(xs, vec![0, 204, 408, 612, 816, 1020, 1224, 1428, 1488]);
        assert_eq!(plan.len(), 81);
        assert!(plan.padded.iter().all(|p| !p));
    }

    #[test]
    fn small_slides() {
        let exact = plan_tiles(512, 512, 512, 0.6).unwrap();
        assert_eq!(exact.origins, vec![(0, 0)]);
        assert_eq!(exact.padded, vec![false]);
        let small = plan_tiles(500, 500, 512, 0.6).unwrap();
        assert_eq!(small.origins, vec![(0, 0)]);
        assert_eq!(small.padded, vec![true]);
    }

    #[test]
    fn invalid_plans() {
        assert!(plan_tiles(0, 10, 512, 0.6).is_err());
        assert!(plan_tiles(100, 100, 16, 0.6).is_err());
        assert!(plan_tiles(100, 100, 64, 0.96).is_err());
        assert!(plan_tiles(100, 100, 64, -0.1).is_err());
    }

    #[test]
    fn plan_json_shape() {
        let plan = plan_tiles(600, 512, 512, 0.6).unwrap();
        let v = serde_json::to_value(&plan).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "slide_width": 600, "slide_height": 512, "tile_size": 512,
                "stride": 204, "origins": [[0, 0], [88, 0]]
            })
        );
        let mut back: TilePlan = serde_json::from_value(v).unwrap();
        back.recompute_padding();
        assert_eq!(back, plan);
    }

    #[test]
    fn extraction_flip_and_padding() {
        let img = RasterImage::from_fn(40, 36, |x, y| [x as u8, y as u8, 7]);
        let plan = plan_tiles(40, 36, 32, 0.5).unwrap();
        let t = plan.tile(0, false).unwrap();
        let tile = extract_tile(&img, &t, 32);
        assert_eq!(tile.get(5, 3), [5, 3, 7]);
        let flipped = extract_tile(&img, &TileRef { flipped: true, ..t }, 32);
        for c in 0..32 {
            assert_eq!(flipped.get(31 - c, 9), tile.get(c, 9));
        }

        let small = RasterImage::filled(20, 20, [9, 9, 9]);
        let plan = plan_tiles(20, 20, 32, 0.6).unwrap();
        let tile = extract_tile(&small, &plan.tile(0, false).unwrap(), 32);
        assert_eq!(tile.get(19, 19), [9, 9, 9]);
        assert_eq!(tile.get(20, 0), [0, 0, 0]);
        assert_eq!(tile.get(0, 25), [0, 0, 0]);
    }

    #[test]
    fn local_to_slide_examples() {
        let t = TileRef { index: 1, origin: (204, 0), flipped: false };
        assert_eq!(map_local_to_slide(&t, Point::new(10.0, 20.0), 512), Point::new(214.0, 20.0));
        let f = TileRef { index: 0, origin: (0, 0), flipped: true };
        assert_eq!(map_local_to_slide(&f, Point::new(0.0, 5.0), 512), Point::new(511.0, 5.0));
        let p = Point::new(300.0, 40.0);
        for tile in [t, f, TileRef { origin: (100, 7), ..f }] {
            let local = map_slide_to_local(&tile, p, 512);
            assert_eq!(map_local_to_slide(&tile, local, 512), p);
        }
    }

    fn det(x: f64, conf: f64) -> Detection {
        Detection::new(x, 0.0, conf).unwrap()
    }

    #[test]
    fn merge_examples() {
        let near = merge_tile_detections(&[det(0.0, 0.8), det(5.0, 0.9)], 30.0);
        assert_eq!(near, vec![det(5.0, 0.9)]);
        let far = merge_tile_detections(&[det(0.0, 0.8), det(40.0, 0.9)], 30.0);
        assert_eq!(far, vec![det(40.0, 0.9), det(0.0, 0.8)]);
        let chain = merge_tile_detections(&[det(0.0, 0.9), det(20.0, 0.8), det(40.0, 0.7)], 30.0);
        assert_eq!(chain, vec![det(0.0, 0.9), det(40.0, 0.7)]);
    }

    #[test]
    fn flipped_boxes_mirror() {
        let tile = TileRef { index: 0, origin: (100, 50), flipped: true };
        let b = crate::geometry::BoundingBox::new(10.0, 20.0, 30.0, 40.0).unwrap();
        let d = Detection::from_box(b, 0.7).unwrap();
        let out = detections_to_slide(&tile, &[d], 64)[0];
        let ob = out.bbox().unwrap();
        assert_eq!((ob.x1, ob.x2, ob.y1, ob.y2), (100.0 + 33.0, 100.0 + 53.0, 70.0, 90.0));
        assert_eq!(out.centroid(), map_local_to_slide(&tile, d.centroid(), 64));
    }
}

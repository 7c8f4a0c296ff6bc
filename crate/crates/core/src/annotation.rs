//! Weak-label mask synthesis: centroid CSV ingestion, random circle/ellipse
//! shapes around each centroid, pixel-center rasterization and tight boxes.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;

pub const CIRCLE_RADIUS_RANGE: (u32, u32) = (10, 16);
pub const ELLIPSE_AXIS_RANGE: (u32, u32) = (5, 13);
pub const ELLIPSE_ORIENTATIONS: [u32; 2] = [60, 90];

// slack for snapping float half-extents onto the integer grid
const SNAP: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnnotationError {
    #[error("malformed annotation at line {line}: {reason}")]
    MalformedAnnotation { line: usize, reason: String },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CentroidLabel {
    pub slide_id: String,
    /// Column.
    pub x: u32,
    /// Row.
    pub y: u32,
}

/// Column order of a centroid CSV.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CsvOrder {
    /// `x,y` = `column,row`
    #[default]
    XY,
    /// `row,column`
    RowCol,
}

/// Parses one integer pair per line; blank lines are skipped.
pub fn parse_centroids(
    slide_id: &str,
    text: &str,
    order: CsvOrder,
) -> Result<Vec<CentroidLabel>, AnnotationError> {
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(AnnotationError::MalformedAnnotation {
                line,
                reason: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        let mut coords = [0u32; 2];
        for (slot, field) in coords.iter_mut().zip(&fields) {
            let value: i64 = field
                .parse()
                .map_err(|_| AnnotationError::MalformedAnnotation {
                    line,
                    reason: format!("{field:?} is not an integer"),
                })?;
            *slot = u32::try_from(value).map_err(|_| AnnotationError::MalformedAnnotation {
                line,
                reason: format!("coordinate {value} out of range"),
            })?;
        }
        let (x, y) = match order {
            CsvOrder::XY => (coords[0], coords[1]),
            CsvOrder::RowCol => (coords[1], coords[0]),
        };
        labels.push(CentroidLabel {
            slide_id: slide_id.to_owned(),
            x,
            y,
        });
    }
    Ok(labels)
}

/// Synthetic label shape. Orientation is the angle in degrees of the `a`
/// semi-axis from the +x (column) axis toward +y (row).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskShape {
    Circle {
        center: (f64, f64),
        radius: u32,
    },
    Ellipse {
        center: (f64, f64),
        a: u32,
        b: u32,
        orientation_deg: u32,
    },
}

impl MaskShape {
    pub fn circle(center: (f64, f64), radius: u32) -> Result<Self, AnnotationError> {
        let (lo, hi) = CIRCLE_RADIUS_RANGE;
        if !(lo..=hi).contains(&radius) {
            return Err(AnnotationError::InvalidShape(format!(
                "circle radius {radius} outside [{lo}, {hi}]"
            )));
        }
        Ok(MaskShape::Circle { center, radius })
    }

    pub fn ellipse(
        center: (f64, f64),
        a: u32,
        b: u32,
        orientation_deg: u32,
    ) -> Result<Self, AnnotationError> {
        let (lo, hi) = ELLIPSE_AXIS_RANGE;
        if !(lo..=hi).contains(&a) || !(lo..=hi).contains(&b) {
            return Err(AnnotationError::InvalidShape(format!(
                "ellipse semi-axes ({a}, {b}) outside [{lo}, {hi}]"
            )));
        }
        if !ELLIPSE_ORIENTATIONS.contains(&orientation_deg) {
            return Err(AnnotationError::InvalidShape(format!(
                "ellipse orientation {orientation_deg} not in {ELLIPSE_ORIENTATIONS:?}"
            )));
        }
        Ok(MaskShape::Ellipse {
            center,
            a,
            b,
            orientation_deg,
        })
    }

    pub fn center(&self) -> (f64, f64) {
        match *self {
            MaskShape::Circle { center, .. } | MaskShape::Ellipse { center, .. } => center,
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let mut out = *self;
        match &mut out {
            MaskShape::Circle { center, .. } | MaskShape::Ellipse { center, .. } => {
                center.0 += dx;
                center.1 += dy;
            }
        }
        out
    }

    /// Analytic inclusion test for the point `(x, y)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            MaskShape::Circle { center, radius } => {
                let (dx, dy) = (x - center.0, y - center.1);
                let r = f64::from(radius);
                dx * dx + dy * dy <= r * r
            }
            MaskShape::Ellipse {
                center,
                a,
                b,
                orientation_deg,
            } => {
                let (sin, cos) = orientation(orientation_deg);
                let (dx, dy) = (x - center.0, y - center.1);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                let (a, b) = (f64::from(a), f64::from(b));
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
        }
    }

    /// Half-extents `(ex, ey)` of the analytic shape.
    pub fn half_extents(&self) -> (f64, f64) {
        match *self {
            MaskShape::Circle { radius, .. } => (f64::from(radius), f64::from(radius)),
            MaskShape::Ellipse {
                a,
                b,
                orientation_deg,
                ..
            } => {
                let (sin, cos) = orientation(orientation_deg);
                let (a2, b2) = (f64::from(a * a), f64::from(b * b));
                (
                    (a2 * cos * cos + b2 * sin * sin).sqrt(),
                    (a2 * sin * sin + b2 * cos * cos).sqrt(),
                )
            }
        }
    }
}

fn orientation(deg: u32) -> (f64, f64) {
    f64::from(deg).to_radians().sin_cos()
}

/// Draws a random shape for one centroid: a fair coin picks circle or
/// ellipse, then integer parameters are drawn uniformly.
pub fn synthesize_shape<R: Rng + ?Sized>(label: &CentroidLabel, rng: &mut R) -> MaskShape {
    let center = (f64::from(label.x), f64::from(label.y));
    if rng.random_bool(0.5) {
        let (lo, hi) = CIRCLE_RADIUS_RANGE;
        MaskShape::Circle {
            center,
            radius: rng.random_range(lo..=hi),
        }
    } else {
        let (lo, hi) = ELLIPSE_AXIS_RANGE;
        let a = rng.random_range(lo..=hi);
        let b = rng.random_range(lo..=hi);
        let orientation_deg = ELLIPSE_ORIENTATIONS[rng.random_range(0..ELLIPSE_ORIENTATIONS.len())];
        MaskShape::Ellipse {
            center,
            a,
            b,
            orientation_deg,
        }
    }
}

/// Tight axis-aligned bound, rounded outward to whole pixels.
pub fn shape_bbox(shape: &MaskShape) -> BoundingBox {
    let (cx, cy) = shape.center();
    let (ex, ey) = shape.half_extents();
    BoundingBox {
        x1: (cx - ex + SNAP).floor(),
        y1: (cy - ey + SNAP).floor(),
        x2: (cx + ex - SNAP).ceil(),
        y2: (cy + ey - SNAP).ceil(),
    }
}

/// Binary raster, row-major, one byte per pixel (0 or 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize] != 0
    }

    pub fn set(&mut self, x: u32, y: u32) {
        self.data[y as usize * self.width as usize + x as usize] = 1;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// On-pixels as `(x, y)`, row-major.
    pub fn on_pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| ((i % w) as u32, (i / w) as u32))
    }

    /// Pixelwise OR.
    pub fn union_with(&mut self, other: &Mask) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
    }

    /// 8-bit single-channel rendering: 0 or 255.
    pub fn to_gray_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect()
    }
}

/// Pixel `(m, n)` is on iff its center `(m, n)` passes the inclusion test.
/// Pixels outside `width × height` are dropped.
pub fn rasterize_shape(shape: &MaskShape, width: u32, height: u32) -> Mask {
    let mut mask = Mask::empty(width, height);
    if width == 0 || height == 0 {
        return mask;
    }
    let bb = shape_bbox(shape);
    let clamp = |v: f64, hi: u32| -> Option<u32> {
        if v < 0.0 {
            Some(0)
        } else if v > f64::from(hi - 1) {
            None
        } else {
            Some(v as u32)
        }
    };
    let (Some(x0), Some(y0)) = (clamp(bb.x1, width), clamp(bb.y1, height)) else {
        return mask;
    };
    if bb.x2 < 0.0 || bb.y2 < 0.0 {
        return mask;
    }
    let x1 = bb.x2.min(f64::from(width - 1)) as u32;
    let y1 = bb.y2.min(f64::from(height - 1)) as u32;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if shape.contains(f64::from(x), f64::from(y)) {
                mask.set(x, y);
            }
        }
    }
    mask
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthObject {
    pub shape: MaskShape,
    pub bbox: BoundingBox,
    pub raster: Mask,
}

impl GroundTruthObject {
    pub fn new(shape: MaskShape, width: u32, height: u32) -> Self {
        Self {
            shape,
            bbox: shape_bbox(&shape),
            raster: rasterize_shape(&shape, width, height),
        }
    }
}

/// Synthesizes one object per label, drawing from `rng` in label order.
pub fn synthesize_objects<R: Rng + ?Sized>(
    labels: &[CentroidLabel],
    width: u32,
    height: u32,
    rng: &mut R,
) -> Vec<GroundTruthObject> {
    labels
        .iter()
        .map(|l| GroundTruthObject::new(synthesize_shape(l, rng), width, height))
        .collect()
}

/// JSON record of one object: `{"kind","center","params","bbox"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub kind: ShapeKind,
    pub center: [f64; 2],
    /// Circle: `[r]`. Ellipse: `[a, b, orientation_deg]`.
    pub params: Vec<f64>,
    pub bbox: BoundingBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSet {
    pub objects: Vec<ObjectRecord>,
}

impl From<&GroundTruthObject> for ObjectRecord {
    fn from(obj: &GroundTruthObject) -> Self {
        let (cx, cy) = obj.shape.center();
        let (kind, params) = match obj.shape {
            MaskShape::Circle { radius, .. } => (ShapeKind::Circle, vec![f64::from(radius)]),
            MaskShape::Ellipse {
                a,
                b,
                orientation_deg,
                ..
            } => (
                ShapeKind::Ellipse,
                vec![f64::from(a), f64::from(b), f64::from(orientation_deg)],
            ),
        };
        ObjectRecord {
            kind,
            center: [cx, cy],
            params,
            bbox: obj.bbox,
        }
    }
}

impl TryFrom<&ObjectRecord> for MaskShape {
    type Error = AnnotationError;

    fn try_from(rec: &ObjectRecord) -> Result<Self, Self::Error> {
        let center = (rec.center[0], rec.center[1]);
        let int = |v: f64| -> Result<u32, AnnotationError> {
            if v.fract() == 0.0 && v >= 0.0 && v <= f64::from(u32::MAX) {
                Ok(v as u32)
            } else {
                Err(AnnotationError::InvalidShape(format!("{v} is not a whole pixel count")))
            }
        };
        match (rec.kind, rec.params.as_slice()) {
            (ShapeKind::Circle, [r]) => MaskShape::circle(center, int(*r)?),
            (ShapeKind::Ellipse, [a, b, t]) => MaskShape::ellipse(center, int(*a)?, int(*b)?, int(*t)?),
            (kind, p) => Err(AnnotationError::InvalidShape(format!(
                "{kind:?} with {} params",
                p.len()
            ))),
        }
    }
}

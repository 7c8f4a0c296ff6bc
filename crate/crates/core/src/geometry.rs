//! Anchor-based detection geometry: boxes, anchors, IoU, region-proposal
//! target assignment, box-delta coding, non-maximum suppression and
//! bilinear ROI-align.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Anchor side lengths in pixels (square-equivalent).
pub const ANCHOR_SCALES: [u32; 4] = [32, 64, 128, 256];

/// Aspect ratios, `w:h`.
pub const ANCHOR_RATIOS: [AspectRatio; 3] =
    [AspectRatio::OneTwo, AspectRatio::OneOne, AspectRatio::TwoOne];

/// Anchors emitted per feature-grid location.
pub const ANCHORS_PER_LOCATION: usize = ANCHOR_SCALES.len() * ANCHOR_RATIOS.len();

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): requires x2 > x1 and y2 > y1")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("invalid thresholds: need 0 <= negative ({negative}) < positive ({positive}) <= 1")]
    InvalidThresholds { positive: f64, negative: f64 },
    #[error("box clamps to zero width or height on a {width}x{height} feature map")]
    DegenerateBox { width: usize, height: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Axis-aligned box in continuous pixel coordinates.
///
/// Serializes as `[x1, y1, x2, y2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        // NaN fails both comparisons
        if x2 > x1 && y2 > y1 && x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()
        {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(GeometryError::InvalidBox { x1, y1, x2, y2 })
        }
    }

    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::new(
            cx - width / 2.0,
            cy - height / 2.0,
            cx + width / 2.0,
            cy + height / 2.0,
        )
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Closed-interval containment test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Anchor aspect ratio `w:h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AspectRatio {
    #[serde(rename = "1:2")]
    OneTwo,
    #[serde(rename = "1:1")]
    OneOne,
    #[serde(rename = "2:1")]
    TwoOne,
}

impl AspectRatio {
    /// `w / h`
    pub fn value(self) -> f64 {
        match self {
            AspectRatio::OneTwo => 0.5,
            AspectRatio::OneOne => 1.0,
            AspectRatio::TwoOne => 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub scale: u32,
    pub ratio: AspectRatio,
    /// Feature-grid cell `(column, row)`.
    pub location: (usize, usize),
}

/// Area-preserving anchor box: `w = s·√ρ`, `h = s/√ρ`.
pub fn anchor_box(cx: f64, cy: f64, scale: u32, ratio: AspectRatio) -> BoundingBox {
    let root = ratio.value().sqrt();
    let s = f64::from(scale);
    let (w, h) = (s * root, s / root);
    BoundingBox {
        x1: cx - w / 2.0,
        y1: cy - h / 2.0,
        x2: cx + w / 2.0,
        y2: cy + h / 2.0,
    }
}

/// Emits [`ANCHORS_PER_LOCATION`] anchors at every grid cell center,
/// `((i + 0.5)·stride, (j + 0.5)·stride)`. Cells are visited row-major;
/// within a cell, scales vary slowest.
pub fn generate_anchors(
    grid_width: usize,
    grid_height: usize,
    feature_stride: f64,
) -> Result<Vec<Anchor>, GeometryError> {
    if grid_width == 0 || grid_height == 0 || !(feature_stride > 0.0) {
        return Err(GeometryError::InvalidArgument(format!(
            "grid {grid_width}x{grid_height} with stride {feature_stride}"
        )));
    }
    let mut anchors = Vec::with_capacity(grid_width * grid_height * ANCHORS_PER_LOCATION);
    for row in 0..grid_height {
        for col in 0..grid_width {
            let cx = (col as f64 + 0.5) * feature_stride;
            let cy = (row as f64 + 0.5) * feature_stride;
            for &scale in &ANCHOR_SCALES {
                for &ratio in &ANCHOR_RATIOS {
                    anchors.push(Anchor {
                        bbox: anchor_box(cx, cy, scale, ratio),
                        scale,
                        ratio,
                        location: (col, row),
                    });
                }
            }
        }
    }
    Ok(anchors)
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Center/size-log regression deltas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDeltas {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDeltas {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }
}

pub fn encode_box_deltas(anchor: &BoundingBox, gt: &BoundingBox) -> BoxDeltas {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BoxDeltas {
        tx: (gx - ax) / aw,
        ty: (gy - ay) / ah,
        tw: (gt.width() / aw).ln(),
        th: (gt.height() / ah).ln(),
    }
}

/// Inverse of [`encode_box_deltas`].
pub fn decode_box_deltas(anchor: &BoundingBox, deltas: &BoxDeltas) -> BoundingBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + deltas.tx * aw;
    let cy = ay + deltas.ty * ah;
    let w = aw * deltas.tw.exp();
    let h = ah * deltas.th.exp();
    BoundingBox {
        x1: cx - w / 2.0,
        y1: cy - h / 2.0,
        x2: cx + w / 2.0,
        y2: cy + h / 2.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

impl AnchorLabel {
    /// Ground-truth class indicator used by the classification loss.
    pub fn indicator(self) -> Option<u8> {
        match self {
            AnchorLabel::Positive => Some(1),
            AnchorLabel::Negative => Some(0),
            AnchorLabel::Ignore => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpnTarget {
    pub anchor_index: usize,
    pub label: AnchorLabel,
    /// Present iff `label == Positive`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deltas: Option<BoxDeltas>,
    /// Highest IoU over all ground-truth boxes (0 when there are none).
    pub max_iou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpnThresholds {
    pub positive: f64,
    pub negative: f64,
}

impl Default for RpnThresholds {
    fn default() -> Self {
        Self {
            positive: 0.7,
            negative: 0.3,
        }
    }
}

impl RpnThresholds {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = (0.0..=1.0).contains(&self.negative)
            && (0.0..=1.0).contains(&self.positive)
            && self.negative < self.positive;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidThresholds {
                positive: self.positive,
                negative: self.negative,
            })
        }
    }
}

/// Labels every anchor against the ground-truth boxes.
///
/// An anchor is positive when its best IoU exceeds `positive`, or when it is
/// the best anchor of some ground-truth box with nonzero overlap (lowest
/// anchor index wins ties). Remaining anchors below `negative` are negative,
/// the rest ignored. Positive anchors regress toward their own best box.
pub fn assign_rpn_targets(
    anchors: &[Anchor],
    gt: &[BoundingBox],
    thresholds: RpnThresholds,
) -> Result<Vec<RpnTarget>, GeometryError> {
    thresholds.validate()?;

    // best (iou, gt index) per anchor; strict > keeps the lowest gt index on ties
    let mut best: Vec<(f64, Option<usize>)> = vec![(0.0, None); anchors.len()];
    // best (iou, anchor index) per gt
    let mut rescue: Vec<(f64, Option<usize>)> = vec![(0.0, None); gt.len()];

    for (ai, anchor) in anchors.iter().enumerate() {
        for (gi, g) in gt.iter().enumerate() {
            let v = iou(&anchor.bbox, g);
            if best[ai].1.is_none() || v > best[ai].0 {
                best[ai] = (v, Some(gi));
            }
            if v > rescue[gi].0 {
                rescue[gi] = (v, Some(ai));
            }
        }
    }

    let mut rescued = vec![false; anchors.len()];
    for &(_, ai) in &rescue {
        if let Some(ai) = ai {
            rescued[ai] = true;
        }
    }

    let targets = anchors
        .iter()
        .enumerate()
        .map(|(ai, anchor)| {
            let (max_iou, best_gt) = best[ai];
            let label = if best_gt.is_some() && (max_iou > thresholds.positive || rescued[ai]) {
                AnchorLabel::Positive
            } else if max_iou < thresholds.negative {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            };
            let deltas = match (label, best_gt) {
                (AnchorLabel::Positive, Some(gi)) => Some(encode_box_deltas(&anchor.bbox, &gt[gi])),
                _ => None,
            };
            RpnTarget {
                anchor_index: ai,
                label,
                deltas,
                max_iou,
            }
        })
        .collect();
    Ok(targets)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// Indices of `items` sorted by confidence descending, input order on ties.
pub(crate) fn confidence_order(confidences: impl Iterator<Item = f64>) -> Vec<usize> {
    let conf: Vec<f64> = confidences.collect();
    let mut order: Vec<usize> = (0..conf.len()).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. Returns the indices of the kept boxes in
/// visiting order (confidence descending, then input index).
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in confidence_order(boxes.iter().map(|b| b.confidence)) {
        if kept
            .iter()
            .all(|&k| iou(&boxes[k].bbox, &boxes[i].bbox) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// Single-channel real-valued raster. Sample `(x, y)` sits at integer
/// coordinates, so pixel `(0, 0)` covers `[-0.5, 0.5]²`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(GeometryError::InvalidArgument(format!(
                "feature map {width}x{height} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Bilinear interpolation with edge replication outside `[0, w-1]×[0, h-1]`.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let lx = x - x0 as f64;
        let ly = y - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - lx) + self.get(x1, y0) * lx;
        let bottom = self.get(x0, y1) * (1.0 - lx) + self.get(x1, y1) * lx;
        top * (1.0 - ly) + bottom * ly
    }
}

/// `out_size × out_size` pooled grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledGrid {
    pub size: usize,
    pub values: Vec<f64>,
}

impl PooledGrid {
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.size + col]
    }
}

/// Pools `bbox` to an `out_size × out_size` grid. The box is first clamped
/// to the raster extent `[-0.5, w-0.5] × [-0.5, h-0.5]`; each bin averages
/// `samples_per_bin²` bilinear samples at fractional positions `(i+0.5)/n`.
pub fn roi_align(
    feature: &FeatureMap,
    bbox: &BoundingBox,
    out_size: usize,
    samples_per_bin: usize,
) -> Result<PooledGrid, GeometryError> {
    if out_size == 0 || samples_per_bin == 0 {
        return Err(GeometryError::InvalidArgument(format!(
            "out_size {out_size}, samples_per_bin {samples_per_bin}"
        )));
    }
    let (max_x, max_y) = (feature.width as f64 - 0.5, feature.height as f64 - 0.5);
    let x1 = bbox.x1.clamp(-0.5, max_x);
    let x2 = bbox.x2.clamp(-0.5, max_x);
    let y1 = bbox.y1.clamp(-0.5, max_y);
    let y2 = bbox.y2.clamp(-0.5, max_y);
    if !(x2 > x1 && y2 > y1) {
        return Err(GeometryError::DegenerateBox {
            width: feature.width,
            height: feature.height,
        });
    }

    let bin_w = (x2 - x1) / out_size as f64;
    let bin_h = (y2 - y1) / out_size as f64;
    let n = samples_per_bin as f64;
    let mut values = Vec::with_capacity(out_size * out_size);
    for by in 0..out_size {
        for bx in 0..out_size {
            let mut acc = 0.0;
            for sy in 0..samples_per_bin {
                let y = y1 + (by as f64 + (sy as f64 + 0.5) / n) * bin_h;
                for sx in 0..samples_per_bin {
                    let x = x1 + (bx as f64 + (sx as f64 + 0.5) / n) * bin_w;
                    acc += feature.bilinear(x, y);
                }
            }
            values.push(acc / (n * n));
        }
    }
    Ok(PooledGrid {
        size: out_size,
        values,
    })
}

//! Detection scoring: one-to-one centroid matching within a radius,
//! precision/recall/F-score, and mitotic-activity grading.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;
use crate::tiling::merge_tile_detections;
use crate::Point;

/// Matching radius of the scoring protocol, in pixels.
pub const DEFAULT_MATCH_RADIUS: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvaluationError {
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error("radius must be positive and finite, got {0}")]
    InvalidRadius(f64),
}

/// A predicted mitosis. When a box is present the centroid is its center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetection", into = "RawDetection")]
pub struct Detection {
    centroid: Point,
    bbox: Option<BoundingBox>,
    confidence: f64,
}

#[derive(Serialize, Deserialize)]
struct RawDetection {
    x: f64,
    y: f64,
    confidence: f64,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    bbox: Option<BoundingBox>,
}

impl TryFrom<RawDetection> for Detection {
    type Error = EvaluationError;

    fn try_from(raw: RawDetection) -> Result<Self, Self::Error> {
        let det = Detection::new(raw.x, raw.y, raw.confidence)?;
        match raw.bbox {
            Some(b) => det.with_box(b),
            None => Ok(det),
        }
    }
}

impl From<Detection> for RawDetection {
    fn from(d: Detection) -> Self {
        RawDetection {
            x: d.centroid.x,
            y: d.centroid.y,
            confidence: d.confidence,
            bbox: d.bbox,
        }
    }
}

impl Detection {
    pub fn new(x: f64, y: f64, confidence: f64) -> Result<Self, EvaluationError> {
        if !x.is_finite() || !y.is_finite() {
            return Err(EvaluationError::InvalidDetection(format!(
                "non-finite centroid ({x}, {y})"
            )));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(EvaluationError::InvalidDetection(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self {
            centroid: Point::new(x, y),
            bbox: None,
            confidence,
        })
    }

    /// Detection centered on `bbox`.
    pub fn from_box(bbox: BoundingBox, confidence: f64) -> Result<Self, EvaluationError> {
        let (cx, cy) = bbox.center();
        Self::new(cx, cy, confidence)?.with_box(bbox)
    }

    /// Attaches a box whose center lies within 0.5 px of the centroid.
    pub fn with_box(mut self, bbox: BoundingBox) -> Result<Self, EvaluationError> {
        let (cx, cy) = bbox.center();
        if (cx - self.centroid.x).abs() > 0.5 || (cy - self.centroid.y).abs() > 0.5 {
            return Err(EvaluationError::InvalidDetection(format!(
                "centroid ({}, {}) is not the center of box {:?}",
                self.centroid.x, self.centroid.y, bbox
            )));
        }
        self.bbox = Some(bbox);
        Ok(self)
    }

    pub fn centroid(&self) -> Point {
        self.centroid
    }

    pub fn bbox(&self) -> Option<BoundingBox> {
        self.bbox
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    /// Same detection moved to `centroid`; an attached box moves with it.
    pub fn relocated(&self, centroid: Point) -> Self {
        let (dx, dy) = (centroid.x - self.centroid.x, centroid.y - self.centroid.y);
        Self {
            centroid,
            bbox: self.bbox.map(|b| BoundingBox {
                x1: b.x1 + dx,
                y1: b.y1 + dy,
                x2: b.x2 + dx,
                y2: b.y2 + dy,
            }),
            confidence: self.confidence,
        }
    }
}

/// Detections file: `{"slide_id", "detections": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub slide_id: String,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub detection: usize,
    pub gt: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Sorted by detection index.
    pub pairs: Vec<MatchedPair>,
    /// False positives.
    pub unmatched_detections: Vec<usize>,
    /// False negatives.
    pub unmatched_gts: Vec<usize>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.pairs.len()
    }

    pub fn fp(&self) -> usize {
        self.unmatched_detections.len()
    }

    pub fn fn_(&self) -> usize {
        self.unmatched_gts.len()
    }

    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.distance).sum()
    }
}

/// Matches detections to ground-truth centroids one-to-one.
///
/// An edge exists where the Euclidean distance is at most `radius`. The
/// result is a maximum-cardinality matching and, among those, one with
/// minimum total distance. The radius graph is split into connected
/// components, each solved as a rectangular assignment problem.
pub fn match_detections(
    detections: &[Detection],
    gts: &[Point],
    radius: f64,
) -> Result<MatchResult, EvaluationError> {
    let points: Vec<Point> = detections.iter().map(Detection::centroid).collect();
    match_points(&points, gts, radius)
}

/// [`match_detections`] over bare centroids.
pub fn match_points(
    detections: &[Point],
    gts: &[Point],
    radius: f64,
) -> Result<MatchResult, EvaluationError> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(EvaluationError::InvalidRadius(radius));
    }
    let n = detections.len();
    let mut sets = DisjointSets::new(n + gts.len());
    let mut edges = Vec::new();
    for (i, d) in detections.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let dist = d.distance(g);
            if dist <= radius {
                sets.union(i, n + j);
                edges.push((i, j, dist));
            }
        }
    }

    // group edges by component root, keeping index order within each group
    let mut components: std::collections::BTreeMap<usize, Vec<(usize, usize, f64)>> =
        std::collections::BTreeMap::new();
    for &(i, j, dist) in &edges {
        components.entry(sets.find(i)).or_default().push((i, j, dist));
    }

    let mut pairs = Vec::new();
    for component in components.values() {
        let mut dets: Vec<usize> = component.iter().map(|e| e.0).collect();
        let mut gtx: Vec<usize> = component.iter().map(|e| e.1).collect();
        dets.sort_unstable();
        dets.dedup();
        gtx.sort_unstable();
        gtx.dedup();
        let mut cost = vec![vec![None; gtx.len()]; dets.len()];
        for &(i, j, dist) in component {
            let r = dets.binary_search(&i).expect("member");
            let c = gtx.binary_search(&j).expect("member");
            cost[r][c] = Some(dist);
        }
        for (r, c) in min_cost_max_matching(&cost) {
            pairs.push(MatchedPair {
                detection: dets[r],
                gt: gtx[c],
                distance: cost[r][c].expect("feasible edge"),
            });
        }
    }
    pairs.sort_by_key(|p| p.detection);

    let mut det_used = vec![false; n];
    let mut gt_used = vec![false; gts.len()];
    for p in &pairs {
        det_used[p.detection] = true;
        gt_used[p.gt] = true;
    }
    Ok(MatchResult {
        pairs,
        unmatched_detections: (0..n).filter(|&i| !det_used[i]).collect(),
        unmatched_gts: (0..gts.len()).filter(|&j| !gt_used[j]).collect(),
    })
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller index becomes the root so component keys are stable
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Maximum-cardinality matching of minimum total cost over the feasible
/// (`Some`) entries of a rectangular cost matrix. Returns `(row, col)`
/// pairs.
///
/// Infeasible cells cost more than any complete feasible assignment, so the
/// assignment optimum first maximizes the number of feasible pairs and then
/// minimizes their summed cost.
fn min_cost_max_matching(cost: &[Vec<Option<f64>>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let feasible_total: f64 = cost.iter().flatten().flatten().sum();
    let big = 2.0 * feasible_total + 1.0;
    let transpose = rows > cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    let at = |r: usize, c: usize| -> Option<f64> {
        if transpose {
            cost[c][r]
        } else {
            cost[r][c]
        }
    };
    let dense: Vec<Vec<f64>> = (0..n)
        .map(|r| (0..m).map(|c| at(r, c).unwrap_or(big)).collect())
        .collect();
    hungarian(&dense)
        .into_iter()
        .enumerate()
        .filter(|&(r, c)| at(r, c).is_some())
        .map(|(r, c)| if transpose { (c, r) } else { (r, c) })
        .collect()
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`), via the shortest augmenting path form of the
/// Hungarian method. Returns the column of each row.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost[0].len();
    debug_assert!(n <= m);
    // 1-based potentials; column 0 is a virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for c in 1..=m {
                if used[c] {
                    continue;
                }
                let reduced = cost[r0 - 1][c - 1] - u[r0] - v[c];
                if reduced < minv[c] {
                    minv[c] = reduced;
                    way[c] = col0;
                }
                if minv[c] < delta {
                    delta = minv[c];
                    col1 = c;
                }
            }
            for c in 0..=m {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for c in 1..=m {
        if owner[c] != 0 {
            assignment[owner[c] - 1] = c - 1;
        }
    }
    assignment
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

/// Precision, recall and their harmonic mean.
///
/// With all counts zero the result is `(1, 1, 1)`. Otherwise a ratio with a
/// zero denominator is 0, and `F = 0` whenever `TP = 0`.
pub fn compute_prf(tp: usize, fp: usize, fn_: usize) -> Metrics {
    if tp + fp + fn_ == 0 {
        return Metrics {
            precision: 1.0,
            recall: 1.0,
            f_score: 1.0,
        };
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Metrics {
        precision,
        recall,
        f_score: harmonic_mean(precision, recall),
    }
}

/// `2PR / (P + R)`, 0 when both are 0.
pub fn harmonic_mean(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Nottingham mitotic-activity score for a count per 10 high-power fields:
/// 0–11 → 1, 12–22 → 2, 23 and above → 3.
pub fn mitotic_activity_score(count_per_10_hpf: usize) -> u8 {
    match count_per_10_hpf {
        0..=11 => 1,
        12..=22 => 2,
        _ => 3,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideEvaluation {
    /// Detections surviving cross-tile deduplication.
    pub merged: Vec<Detection>,
    pub matching: MatchResult,
    pub metrics: Metrics,
    /// From the merged detection count.
    pub activity_score_pred: u8,
    /// From the ground-truth count.
    pub activity_score_gt: u8,
}

/// Metrics JSON: `{"tp","fp","fn","precision","recall","f_score",
/// "activity_score_pred","activity_score_gt"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub activity_score_pred: u8,
    pub activity_score_gt: u8,
}

impl SlideEvaluation {
    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            tp: self.matching.tp(),
            fp: self.matching.fp(),
            fn_: self.matching.fn_(),
            precision: self.metrics.precision,
            recall: self.metrics.recall,
            f_score: self.metrics.f_score,
            activity_score_pred: self.activity_score_pred,
            activity_score_gt: self.activity_score_gt,
        }
    }
}

/// Merge → match → metrics → grading for one slide. Detections must already
/// be in slide coordinates.
pub fn evaluate_slide(
    per_tile_detections: &[Vec<Detection>],
    gts: &[Point],
    radius: f64,
    dedup_radius: f64,
) -> Result<SlideEvaluation, EvaluationError> {
    let all: Vec<Detection> = per_tile_detections.iter().flatten().copied().collect();
    let merged = merge_tile_detections(&all, dedup_radius);
    let matching = match_detections(&merged, gts, radius)?;
    let metrics = compute_prf(matching.tp(), matching.fp(), matching.fn_());
    Ok(SlideEvaluation {
        activity_score_pred: mitotic_activity_score(merged.len()),
        activity_score_gt: mitotic_activity_score(gts.len()),
        merged,
        matching,
        metrics,
    })
}

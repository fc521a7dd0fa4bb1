//! Boxes, frustum inlier sets and the set-based matching costs.

use std::cmp::Ordering;

use nalgebra::Point2;
use thiserror::Error;

use crate::calib::Projection;
use crate::kitti_io::{Detection2D, View};
use crate::matcher::MatchSet;

#[derive(Debug, Error, PartialEq)]
pub enum FrustumError {
    #[error("box lies entirely outside the image after enlargement")]
    EmptyAfterClip,
    #[error("3D IoU undefined: both frustums are empty")]
    BothEmpty,
    #[error("RoI id {index} out of range for {len} boxes")]
    RoiOutOfRange { index: usize, len: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Axis-aligned image box, stored by center and size (pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct BBox2D {
    pub center: Point2<f64>,
    pub width: f64,
    pub height: f64,
    pub view: View,
    pub class_label: String,
    pub score: f64,
}

impl BBox2D {
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64, view: View, class_label: &str, score: f64) -> Self {
        BBox2D {
            center: Point2::new(0.5 * (x1 + x2), 0.5 * (y1 + y2)),
            width: x2 - x1,
            height: y2 - y1,
            view,
            class_label: class_label.to_string(),
            score,
        }
    }

    pub fn from_detection(d: &Detection2D) -> Self {
        Self::from_corners(d.x1, d.y1, d.x2, d.y2, d.view, &d.class_label, d.score)
    }

    /// `(x1, y1, x2, y2)`.
    pub fn extent(&self) -> [f64; 4] {
        let (hw, hh) = (0.5 * self.width, 0.5 * self.height);
        [
            self.center.x - hw,
            self.center.y - hh,
            self.center.x + hw,
            self.center.y + hh,
        ]
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        let [x1, y1, x2, y2] = self.extent();
        u >= x1 && u <= x2 && v >= y1 && v <= y2
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Plain 2D IoU of two boxes.
    pub fn iou_2d(&self, other: &BBox2D) -> f64 {
        let [a1, b1, a2, b2] = self.extent();
        let [c1, d1, c2, d2] = other.extent();
        let iw = (a2.min(c2) - a1.max(c1)).max(0.0);
        let ih = (b2.min(d2) - b1.max(d1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// Scales width and height by `1 + s_enlarge` about the center, then clips
/// to `[0, W] × [0, H]` and recenters on the clipped extent.
pub fn enlarge_bbox(b: &BBox2D, s_enlarge: f64, image_size: (u32, u32)) -> Result<BBox2D, FrustumError> {
    let w = b.width * (1.0 + s_enlarge);
    let h = b.height * (1.0 + s_enlarge);
    let (iw, ih) = (image_size.0 as f64, image_size.1 as f64);
    let x1 = (b.center.x - 0.5 * w).max(0.0);
    let x2 = (b.center.x + 0.5 * w).min(iw);
    let y1 = (b.center.y - 0.5 * h).max(0.0);
    let y2 = (b.center.y + 0.5 * h).min(ih);
    if !(x2 > x1 && y2 > y1) {
        return Err(FrustumError::EmptyAfterClip);
    }
    Ok(BBox2D::from_corners(x1, y1, x2, y2, b.view, &b.class_label, b.score))
}

/// Points of the scene whose projection lands inside one box.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrustumInliers {
    pub box_index: usize,
    /// Strictly increasing point indices.
    pub indices: Vec<u32>,
}

impl FrustumInliers {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Width in pixels of the `u` columns the projected-point index is cut into.
const COLUMN_PX: f64 = 16.0;

#[derive(Debug, Clone, Copy)]
struct IndexedPoint {
    column: i64,
    v: f64,
    u: f64,
    index: u32,
}

/// A cloud projected into one view. Valid points are bucketed into `u`
/// columns and sorted by `v` inside each column, so a box query only touches
/// points near its own footprint.
#[derive(Debug, Clone)]
pub struct ProjectedCloud {
    pub view: View,
    pub projections: Vec<Projection>,
    by_column: Vec<IndexedPoint>,
}

impl ProjectedCloud {
    pub fn new(view: View, projections: Vec<Projection>) -> Self {
        let mut by_column: Vec<IndexedPoint> = projections
            .iter()
            .enumerate()
            .filter(|(_, p)| p.valid)
            .map(|(i, p)| IndexedPoint {
                column: (p.u / COLUMN_PX).floor() as i64,
                v: p.v,
                u: p.u,
                index: i as u32,
            })
            .collect();
        by_column.sort_unstable_by(|a, b| {
            a.column
                .cmp(&b.column)
                .then(a.v.total_cmp(&b.v))
                .then(a.index.cmp(&b.index))
        });
        ProjectedCloud {
            view,
            projections,
            by_column,
        }
    }

    pub fn len(&self) -> usize {
        self.projections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projections.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.by_column.len()
    }
}

/// Indices of valid points whose projection lies in the closed box extent.
pub fn frustum_inliers(projected: &ProjectedCloud, b: &BBox2D, box_index: usize) -> FrustumInliers {
    let [x1, y1, x2, y2] = b.extent();
    let (c1, c2) = ((x1 / COLUMN_PX).floor() as i64, (x2 / COLUMN_PX).floor() as i64);
    let pts = &projected.by_column;
    let mut hits = Vec::new();
    let mut pos = pts.partition_point(|p| p.column < c1);
    while pos < pts.len() && pts[pos].column <= c2 {
        let column = pts[pos].column;
        let end = pos + pts[pos..].partition_point(|p| p.column == column);
        let cells = &pts[pos..end];
        // columns strictly inside the box need no u test
        let interior = column as f64 * COLUMN_PX >= x1 && (column + 1) as f64 * COLUMN_PX <= x2;
        let lo = cells.partition_point(|p| p.v < y1);
        for p in cells[lo..].iter().take_while(|p| p.v <= y2) {
            if interior || (p.u >= x1 && p.u <= x2) {
                hits.push(p.index);
            }
        }
        pos = end;
    }
    FrustumInliers {
        box_index,
        indices: sort_indices(hits, projected.projections.len()),
    }
}

/// Sorts distinct point ids below `n`. Large hit sets go through a bitmap,
/// which is linear in `n / 64 + hits` instead of `hits · log(hits)`.
fn sort_indices(mut hits: Vec<u32>, n: usize) -> Vec<u32> {
    let words = n.div_ceil(64);
    if words > 4 * hits.len() {
        hits.sort_unstable();
        return hits;
    }
    let mut bits = vec![0u64; words];
    for &i in &hits {
        bits[i as usize / 64] |= 1 << (i % 64);
    }
    hits.clear();
    for (w, &word) in bits.iter().enumerate() {
        let mut word = word;
        while word != 0 {
            hits.push((w * 64) as u32 + word.trailing_zeros());
            word &= word - 1;
        }
    }
    hits
}

fn merge_count(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

pub fn intersection_count(a: &FrustumInliers, b: &FrustumInliers) -> usize {
    merge_count(&a.indices, &b.indices)
}

/// Sorted indices present in both sets.
pub fn intersection(a: &FrustumInliers, b: &FrustumInliers) -> Vec<u32> {
    let (a, b) = (&a.indices, &b.indices);
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Point-set IoU `|a ∩ b| / |a ∪ b|`.
pub fn iou_3d_cost(a: &FrustumInliers, b: &FrustumInliers) -> Result<f64, FrustumError> {
    if a.is_empty() && b.is_empty() {
        return Err(FrustumError::BothEmpty);
    }
    let inter = intersection_count(a, b);
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// Keeps pairs whose stereo-frustum intersection has at least `n_thres` points.
pub fn min_intersection_filter(mut pairs: MatchSet, n_thres: usize) -> MatchSet {
    pairs.pairs.retain(|p| p.n_intersection >= n_thres);
    pairs
}

/// Matching thresholds. Defaults are the reference configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchConfig {
    /// Fractional growth of box width and height.
    pub s_enlarge: f64,
    /// Minimum stereo-frustum intersection size.
    pub n_thres: usize,
    /// Maximum center-to-epipolar-line distance, pixels.
    pub d_thres: f64,
    /// NCC acceptance threshold.
    pub p_thres: f64,
    /// 3D IoU acceptance threshold.
    pub p_3d_thres: f64,
    /// Slack (pixels) on the non-negative disparity rule.
    pub disparity_margin: f64,
    /// Side of the square patch NCC is evaluated on.
    pub align_size: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            s_enlarge: 0.08,
            n_thres: 5,
            d_thres: 30.0,
            p_thres: 0.4,
            p_3d_thres: 0.5,
            disparity_margin: 5.0,
            align_size: 64,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), FrustumError> {
        let bad = |m: &str| Err(FrustumError::InvalidConfig(m.to_string()));
        if !(self.s_enlarge >= 0.0 && self.s_enlarge.is_finite()) {
            return bad("s_enlarge must be >= 0");
        }
        if self.n_thres < 1 {
            return bad("n_thres must be >= 1");
        }
        if !(self.d_thres > 0.0 && self.d_thres.is_finite()) {
            return bad("d_thres must be > 0");
        }
        if !(self.p_thres > -1.0 && self.p_thres <= 1.0) {
            return bad("p_thres must lie in (-1, 1]");
        }
        if !(self.p_3d_thres > 0.0 && self.p_3d_thres <= 1.0) {
            return bad("p_3d_thres must lie in (0, 1]");
        }
        if !(self.disparity_margin >= 0.0 && self.disparity_margin.is_finite()) {
            return bad("disparity_margin must be >= 0");
        }
        if self.align_size < 2 {
            return bad("align_size must be >= 2");
        }
        Ok(())
    }
}

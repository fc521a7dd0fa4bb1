//! Left/right RoI matching.
//!
//! Four strategies are provided, each selecting at most one right RoI per
//! left RoI:
//!
//! | name    | candidates               | cost            |
//! |---------|--------------------------|-----------------|
//! | `3dces` | epipolar band, leftwards | frustum 3D IoU  |
//! | `3dcme` | every right RoI          | frustum 3D IoU  |
//! | `rsc`   | epipolar band, leftwards | patch ZNCC      |
//! | `rsccc` | both directions          | patch ZNCC, kept only if both directions agree |
//!
//! A candidate is accepted when it holds the maximum cost of its row and
//! that cost reaches the configured threshold. Ties go to the smaller RoI
//! id. Every algorithm finishes with the minimum-intersection filter.

use std::sync::OnceLock;

use image::GrayImage;
use rayon::prelude::*;

use crate::calib::CalibrationSet;
use crate::error::{Error, Result};
use crate::frustum::{
    enlarge_bbox, frustum_inliers, intersection, iou_3d_cost, min_intersection_filter, BBox2D,
    FrustumError, FrustumInliers, MatchConfig, ProjectedCloud,
};
use crate::kitti_io::{Detection2D, PointCloud, View};
use crate::patch::{extract_patch, ncc, ImagePatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    /// 3D IoU cost with epipolar search (`3dces`).
    IouEpipolar,
    /// 3D IoU cost over all right RoIs (`3dcme`).
    IouExhaustive,
    /// Regional similarity cost (`rsc`).
    Similarity,
    /// Regional similarity with left-right consistency check (`rsccc`).
    SimilarityChecked,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::IouEpipolar,
        Algorithm::IouExhaustive,
        Algorithm::Similarity,
        Algorithm::SimilarityChecked,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::IouEpipolar => "3dces",
            Algorithm::IouExhaustive => "3dcme",
            Algorithm::Similarity => "rsc",
            Algorithm::SimilarityChecked => "rsccc",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name.to_ascii_lowercase())
    }

    pub fn needs_images(self) -> bool {
        matches!(self, Algorithm::Similarity | Algorithm::SimilarityChecked)
    }

    pub fn cost_kind(self) -> CostKind {
        if self.needs_images() {
            CostKind::Ncc
        } else {
            CostKind::Iou3d
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CostKind {
    Ncc,
    Iou3d,
}

impl CostKind {
    pub fn name(self) -> &'static str {
        match self {
            CostKind::Ncc => "ncc",
            CostKind::Iou3d => "iou3d",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "ncc" => Some(CostKind::Ncc),
            "iou3d" => Some(CostKind::Iou3d),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchPair {
    pub left_idx: usize,
    pub right_idx: usize,
    pub cost: f64,
    pub cost_kind: CostKind,
    pub n_intersection: usize,
    /// Sorted point ids inside both frustums.
    pub intersection_indices: Vec<u32>,
}

/// Accepted pairs, ordered by `left_idx`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub algorithm: Algorithm,
    pub pairs: Vec<MatchPair>,
}

impl MatchSet {
    pub fn new(algorithm: Algorithm) -> Self {
        MatchSet {
            algorithm,
            pairs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair_ids(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(|p| (p.left_idx, p.right_idx)).collect()
    }
}

/// Segmented points of one matched pair, labelled from the left detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub left_idx: usize,
    pub right_idx: usize,
    pub class_label: String,
    pub score: f64,
    pub indices: Vec<u32>,
}

/// Everything the matchers read for one stereo frame: enlarged boxes, the
/// cloud projected into both views and, for the similarity costs, images.
#[derive(Debug, Clone)]
pub struct StereoFrame {
    pub calib: CalibrationSet,
    pub left_boxes: Vec<BBox2D>,
    pub right_boxes: Vec<BBox2D>,
    pub left_proj: ProjectedCloud,
    pub right_proj: ProjectedCloud,
    pub images: Option<(GrayImage, GrayImage)>,
}

impl StereoFrame {
    /// Enlarges the detections by `config.s_enlarge` and projects the cloud
    /// into both views.
    pub fn prepare(
        calib: CalibrationSet,
        cloud: &PointCloud,
        left: &[Detection2D],
        right: &[Detection2D],
        images: Option<(GrayImage, GrayImage)>,
        config: &MatchConfig,
        image_size: (u32, u32),
    ) -> Result<Self> {
        config.validate()?;
        let enlarge = |dets: &[Detection2D]| -> Result<Vec<BBox2D>> {
            dets.iter()
                .map(|d| Ok(enlarge_bbox(&BBox2D::from_detection(d), config.s_enlarge, image_size)?))
                .collect()
        };
        let left_boxes = enlarge(left)?;
        let right_boxes = enlarge(right)?;
        let left_proj = ProjectedCloud::new(View::Left, calib.project_velo_to_image(cloud, View::Left));
        let right_proj = ProjectedCloud::new(View::Right, calib.project_velo_to_image(cloud, View::Right));
        Ok(StereoFrame {
            calib,
            left_boxes,
            right_boxes,
            left_proj,
            right_proj,
            images,
        })
    }

    fn boxes(&self, view: View) -> &[BBox2D] {
        match view {
            View::Left => &self.left_boxes,
            View::Right => &self.right_boxes,
        }
    }

    fn projected(&self, view: View) -> &ProjectedCloud {
        match view {
            View::Left => &self.left_proj,
            View::Right => &self.right_proj,
        }
    }

    pub fn frustum(&self, view: View, idx: usize) -> FrustumInliers {
        frustum_inliers(self.projected(view), &self.boxes(view)[idx], idx)
    }
}

/// Right RoIs whose centers lie within `d_thres` of the epipolar line of the
/// left center and no further right than `disparity_margin` pixels.
pub fn candidates_by_epipolar(
    calib: &CalibrationSet,
    left_box: &BBox2D,
    right_boxes: &[BBox2D],
    d_thres: f64,
    disparity_margin: f64,
) -> Vec<usize> {
    let Ok(line) = calib.epipolar_line_l2r(left_box.center) else {
        return Vec::new();
    };
    right_boxes
        .iter()
        .enumerate()
        .filter(|(_, r)| line.distance(r.center) < d_thres && r.center.x <= left_box.center.x + disparity_margin)
        .map(|(j, _)| j)
        .collect()
}

/// Mirror of [`candidates_by_epipolar`]: left RoIs for a right RoI, searching
/// rightwards along `Fᵀ·r`.
pub fn candidates_by_epipolar_r2l(
    calib: &CalibrationSet,
    right_box: &BBox2D,
    left_boxes: &[BBox2D],
    d_thres: f64,
    disparity_margin: f64,
) -> Vec<usize> {
    let Ok(line) = calib.epipolar_line_r2l(right_box.center) else {
        return Vec::new();
    };
    left_boxes
        .iter()
        .enumerate()
        .filter(|(_, l)| line.distance(l.center) < d_thres && l.center.x >= right_box.center.x - disparity_margin)
        .map(|(i, _)| i)
        .collect()
}

/// Argmax over `(id, cost)` with ties to the smaller id, accepted only when
/// the maximum reaches `threshold`.
fn select_best(costs: impl IntoIterator<Item = (usize, f64)>, threshold: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (id, cost) in costs {
        best = match best {
            Some((bid, bc)) if bc > cost || (bc == cost && bid < id) => Some((bid, bc)),
            _ => Some((id, cost)),
        };
    }
    best.filter(|&(_, c)| c >= threshold)
}

struct LazyFrustums<'a> {
    frame: &'a StereoFrame,
    view: View,
    cells: Vec<OnceLock<FrustumInliers>>,
}

impl<'a> LazyFrustums<'a> {
    fn new(frame: &'a StereoFrame, view: View) -> Self {
        let cells = (0..frame.boxes(view).len()).map(|_| OnceLock::new()).collect();
        LazyFrustums { frame, view, cells }
    }

    fn get(&self, idx: usize) -> &FrustumInliers {
        self.cells[idx].get_or_init(|| self.frame.frustum(self.view, idx))
    }
}

fn finish(algorithm: Algorithm, pairs: Vec<Option<MatchPair>>, config: &MatchConfig) -> MatchSet {
    let set = MatchSet {
        algorithm,
        pairs: pairs.into_iter().flatten().collect(),
    };
    min_intersection_filter(set, config.n_thres)
}

fn match_iou(frame: &StereoFrame, config: &MatchConfig, algorithm: Algorithm) -> MatchSet {
    let gated = algorithm == Algorithm::IouEpipolar;
    let right = LazyFrustums::new(frame, View::Right);
    let n_right = frame.right_boxes.len();
    let pairs: Vec<Option<MatchPair>> = (0..frame.left_boxes.len())
        .into_par_iter()
        .map(|i| {
            let candidates: Vec<usize> = if gated {
                candidates_by_epipolar(
                    &frame.calib,
                    &frame.left_boxes[i],
                    &frame.right_boxes,
                    config.d_thres,
                    config.disparity_margin,
                )
            } else {
                (0..n_right).collect()
            };
            if candidates.is_empty() {
                return None;
            }
            let left = frame.frustum(View::Left, i);
            // zero-overlap and empty-vs-empty candidates are not costs
            let costs = candidates.iter().filter_map(|&j| match iou_3d_cost(&left, right.get(j)) {
                Ok(c) if c > 0.0 => Some((j, c)),
                _ => None,
            });
            let (j, cost) = select_best(costs, config.p_3d_thres)?;
            let inter = intersection(&left, right.get(j));
            Some(MatchPair {
                left_idx: i,
                right_idx: j,
                cost,
                cost_kind: CostKind::Iou3d,
                n_intersection: inter.len(),
                intersection_indices: inter,
            })
        })
        .collect();
    finish(algorithm, pairs, config)
}

pub fn match_3dces(frame: &StereoFrame, config: &MatchConfig) -> Result<MatchSet> {
    config.validate()?;
    Ok(match_iou(frame, config, Algorithm::IouEpipolar))
}

pub fn match_3dcme(frame: &StereoFrame, config: &MatchConfig) -> Result<MatchSet> {
    config.validate()?;
    Ok(match_iou(frame, config, Algorithm::IouExhaustive))
}

/// Aligned patches of one view, extracted on first use. `None` marks a box
/// that covers no pixel.
struct LazyPatches<'a> {
    boxes: &'a [BBox2D],
    image: &'a GrayImage,
    size: usize,
    cells: Vec<OnceLock<Option<ImagePatch>>>,
}

impl<'a> LazyPatches<'a> {
    fn new(boxes: &'a [BBox2D], image: &'a GrayImage, size: usize) -> Self {
        let cells = (0..boxes.len()).map(|_| OnceLock::new()).collect();
        LazyPatches {
            boxes,
            image,
            size,
            cells,
        }
    }

    fn get(&self, idx: usize) -> Option<&ImagePatch> {
        self.cells[idx]
            .get_or_init(|| {
                extract_patch(self.image, &self.boxes[idx])
                    .ok()
                    .map(|p| p.resize(self.size, self.size))
            })
            .as_ref()
    }
}

/// Similarity cost; undefined correlations (flat or empty patches) count as -1.
fn similarity(a: Option<&ImagePatch>, b: Option<&ImagePatch>) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => ncc(a, b).unwrap_or(-1.0),
        _ => -1.0,
    }
}

/// One direction of the similarity search. Returns, per query RoI, the
/// accepted `(query, target, cost)`.
fn similarity_pass(
    frame: &StereoFrame,
    config: &MatchConfig,
    query: (&LazyPatches, View),
    target: &LazyPatches,
) -> Vec<Option<(usize, usize, f64)>> {
    let (qp, qview) = query;
    let n = frame.boxes(qview).len();
    (0..n)
        .into_par_iter()
        .map(|q| {
            let candidates = match qview {
                View::Left => candidates_by_epipolar(
                    &frame.calib,
                    &frame.left_boxes[q],
                    &frame.right_boxes,
                    config.d_thres,
                    config.disparity_margin,
                ),
                View::Right => candidates_by_epipolar_r2l(
                    &frame.calib,
                    &frame.right_boxes[q],
                    &frame.left_boxes,
                    config.d_thres,
                    config.disparity_margin,
                ),
            };
            let costs = candidates
                .iter()
                .map(|&t| (t, similarity(qp.get(q), target.get(t))));
            select_best(costs, config.p_thres).map(|(t, c)| (q, t, c))
        })
        .collect()
}

fn images(frame: &StereoFrame, algorithm: Algorithm) -> Result<(&GrayImage, &GrayImage)> {
    frame
        .images
        .as_ref()
        .map(|(l, r)| (l, r))
        .ok_or_else(|| Error::Usage(format!("{algorithm} needs left and right images")))
}

fn with_intersections(frame: &StereoFrame, accepted: Vec<(usize, usize, f64)>) -> Vec<Option<MatchPair>> {
    accepted
        .into_par_iter()
        .map(|(i, j, cost)| {
            let inter = intersection(&frame.frustum(View::Left, i), &frame.frustum(View::Right, j));
            Some(MatchPair {
                left_idx: i,
                right_idx: j,
                cost,
                cost_kind: CostKind::Ncc,
                n_intersection: inter.len(),
                intersection_indices: inter,
            })
        })
        .collect()
}

pub fn match_rsc(frame: &StereoFrame, config: &MatchConfig) -> Result<MatchSet> {
    config.validate()?;
    let (li, ri) = images(frame, Algorithm::Similarity)?;
    let left = LazyPatches::new(&frame.left_boxes, li, config.align_size);
    let right = LazyPatches::new(&frame.right_boxes, ri, config.align_size);
    let accepted: Vec<_> = similarity_pass(frame, config, (&left, View::Left), &right)
        .into_iter()
        .flatten()
        .collect();
    Ok(finish(Algorithm::Similarity, with_intersections(frame, accepted), config))
}

pub fn match_rsccc(frame: &StereoFrame, config: &MatchConfig) -> Result<MatchSet> {
    config.validate()?;
    let (li, ri) = images(frame, Algorithm::SimilarityChecked)?;
    let left = LazyPatches::new(&frame.left_boxes, li, config.align_size);
    let right = LazyPatches::new(&frame.right_boxes, ri, config.align_size);
    let (m_l, m_r) = rayon::join(
        || similarity_pass(frame, config, (&left, View::Left), &right),
        || similarity_pass(frame, config, (&right, View::Right), &left),
    );
    // keep (l, r) from the left pass only if the right pass chose l for r
    let accepted: Vec<_> = m_l
        .into_iter()
        .flatten()
        .filter(|&(i, j, _)| matches!(m_r[j], Some((_, back, _)) if back == i))
        .collect();
    Ok(finish(Algorithm::SimilarityChecked, with_intersections(frame, accepted), config))
}

pub fn run_matcher(algorithm: Algorithm, frame: &StereoFrame, config: &MatchConfig) -> Result<MatchSet> {
    match algorithm {
        Algorithm::IouEpipolar => match_3dces(frame, config),
        Algorithm::IouExhaustive => match_3dcme(frame, config),
        Algorithm::Similarity => match_rsc(frame, config),
        Algorithm::SimilarityChecked => match_rsccc(frame, config),
    }
}

/// Stereo-frustum intersection of every matched pair, labelled with the left
/// detection's class and score.
pub fn segment_scene(matches: &MatchSet, frame: &StereoFrame) -> Result<Vec<Segment>> {
    matches
        .pairs
        .par_iter()
        .map(|p| {
            for (idx, len) in [(p.left_idx, frame.left_boxes.len()), (p.right_idx, frame.right_boxes.len())] {
                if idx >= len {
                    return Err(FrustumError::RoiOutOfRange { index: idx, len }.into());
                }
            }
            let left = frame.frustum(View::Left, p.left_idx);
            let right = frame.frustum(View::Right, p.right_idx);
            let b = &frame.left_boxes[p.left_idx];
            Ok(Segment {
                left_idx: p.left_idx,
                right_idx: p.right_idx,
                class_label: b.class_label.clone(),
                score: b.score,
                indices: intersection(&left, &right),
            })
        })
        .collect()
}

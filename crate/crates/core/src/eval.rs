//! Matching quality, point filtering ratio and per-phase timing.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::time::Instant;

use thiserror::Error;

use crate::calib::derive_calibration;
use crate::frustum::{FrustumInliers, MatchConfig};
use crate::kitti_io::FrameBytes;
use crate::matcher::{run_matcher, segment_scene, Algorithm, Segment, StereoFrame};
use crate::Result;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("matched frustums contain no points")]
    EmptyDenominator,
    #[error("no frustum supplied for left RoI {0}")]
    MissingFrustum(usize),
    #[error("repetitions must be >= 1")]
    NoRepetitions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// `None` when nothing was predicted.
    pub precision: Option<f64>,
    /// `None` when the truth is empty.
    pub recall: Option<f64>,
}

/// Exact-pair precision and recall. Duplicate pairs count once.
pub fn match_pr(predicted: &[(usize, usize)], truth: &[(usize, usize)]) -> MatchReport {
    let pred: BTreeSet<_> = predicted.iter().copied().collect();
    let gt: BTreeSet<_> = truth.iter().copied().collect();
    let tp = pred.intersection(&gt).count();
    let fp = pred.len() - tp;
    let fn_ = gt.len() - tp;
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    MatchReport {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
    }
}

/// `1 - Σ|segment| / Σ|left frustum|` over the matched left RoIs: the share of
/// single-frustum points removed by intersecting with the right frustum.
pub fn filtering_ratio(segments: &[Segment], left_frustums: &[FrustumInliers]) -> Result<f64, EvalError> {
    let by_box: HashMap<usize, &FrustumInliers> = left_frustums.iter().map(|f| (f.box_index, f)).collect();
    let mut kept = 0usize;
    let mut total = 0usize;
    for s in segments {
        let f = by_box.get(&s.left_idx).ok_or(EvalError::MissingFrustum(s.left_idx))?;
        kept += s.indices.len();
        total += f.len();
    }
    if total == 0 {
        return Err(EvalError::EmptyDenominator);
    }
    Ok(1.0 - kept as f64 / total as f64)
}

pub const PHASES: [&str; 4] = ["io", "projection", "roi_matching", "segmentation"];

/// Median per-phase wall-clock time in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTimings {
    pub io_ms: f64,
    pub projection_ms: f64,
    pub roi_matching_ms: f64,
    pub segmentation_ms: f64,
    pub repetitions: usize,
}

impl PhaseTimings {
    /// Medians over samples of `[io, projection, roi_matching, segmentation]`.
    pub fn from_samples(samples: &[[f64; 4]]) -> Result<Self, EvalError> {
        if samples.is_empty() {
            return Err(EvalError::NoRepetitions);
        }
        let m = |k: usize| median(samples.iter().map(|s| s[k]).collect());
        Ok(PhaseTimings {
            io_ms: m(0),
            projection_ms: m(1),
            roi_matching_ms: m(2),
            segmentation_ms: m(3),
            repetitions: samples.len(),
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.io_ms, self.projection_ms, self.roi_matching_ms, self.segmentation_ms]
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Fixed input for [`bench_phases`].
#[derive(Debug, Clone)]
pub struct Workload {
    pub frames: Vec<FrameBytes>,
    pub config: MatchConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub algorithm: Algorithm,
    pub timings: PhaseTimings,
    /// Per repetition, summed over all frames.
    pub samples: Vec<[f64; 4]>,
    /// Total matches over the workload in the last repetition.
    pub matches: usize,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn run_once(workload: &Workload, algorithm: Algorithm) -> Result<([f64; 4], usize)> {
    let mut acc = [0.0; 4];
    let mut matches = 0;
    for bytes in &workload.frames {
        let t = Instant::now();
        let frame = bytes.decode()?;
        acc[0] += ms_since(t);

        let t = Instant::now();
        let calib = derive_calibration(&frame.calib)?;
        let images = if algorithm.needs_images() { frame.images } else { None };
        let stereo = StereoFrame::prepare(
            calib,
            &frame.cloud,
            &frame.left_detections,
            &frame.right_detections,
            images,
            &workload.config,
            frame.image_size,
        )?;
        acc[1] += ms_since(t);

        let t = Instant::now();
        let m = run_matcher(algorithm, &stereo, &workload.config)?;
        acc[2] += ms_since(t);

        let t = Instant::now();
        let segments = segment_scene(&m, &stereo)?;
        std::hint::black_box(&segments);
        acc[3] += ms_since(t);
        matches += m.len();
    }
    Ok((acc, matches))
}

/// Times every phase of the pipeline for each algorithm on a single worker
/// thread. Algorithms are interleaved within each repetition so slow drift
/// on the host affects them alike.
pub fn bench_phases(workload: &Workload, algorithms: &[Algorithm], repetitions: usize) -> Result<Vec<BenchResult>> {
    if repetitions == 0 {
        return Err(EvalError::NoRepetitions.into());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool");
    pool.install(|| {
        let mut samples: Vec<Vec<[f64; 4]>> = vec![Vec::with_capacity(repetitions); algorithms.len()];
        let mut matches = vec![0; algorithms.len()];
        for _ in 0..repetitions {
            for (k, &alg) in algorithms.iter().enumerate() {
                let (s, n) = run_once(workload, alg)?;
                samples[k].push(s);
                matches[k] = n;
            }
        }
        algorithms
            .iter()
            .zip(samples)
            .zip(matches)
            .map(|((&algorithm, samples), matches)| {
                Ok(BenchResult {
                    algorithm,
                    timings: PhaseTimings::from_samples(&samples)?,
                    samples,
                    matches,
                })
            })
            .collect()
    })
}

/// Human-readable table, one row per algorithm.
pub fn format_report(results: &[BenchResult]) -> String {
    let mut out = format!(
        "{:<8} {:>10} {:>12} {:>14} {:>14} {:>6} {:>8}\n",
        "algo", "io_ms", "projection_ms", "roi_matching_ms", "segmentation_ms", "reps", "matches"
    );
    for r in results {
        let t = &r.timings;
        let _ = writeln!(
            out,
            "{:<8} {:>10.3} {:>12.3} {:>14.3} {:>14.3} {:>6} {:>8}",
            r.algorithm.name(),
            t.io_ms,
            t.projection_ms,
            t.roi_matching_ms,
            t.segmentation_ms,
            t.repetitions,
            r.matches
        );
    }
    out
}

/// One CSV row per algorithm, phase and repetition, plus a `median` row.
pub fn format_records(results: &[BenchResult]) -> String {
    let mut out = String::from("algorithm,phase,repetition,ms\n");
    for r in results {
        for (rep, s) in r.samples.iter().enumerate() {
            for (k, phase) in PHASES.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{}", r.algorithm.name(), phase, rep, s[k]);
            }
        }
        for (k, phase) in PHASES.iter().enumerate() {
            let _ = writeln!(out, "{},{},median,{}", r.algorithm.name(), phase, r.timings.as_array()[k]);
        }
    }
    out
}

//! Readers and writers for KITTI object-benchmark files and for the
//! match/segment outputs of this crate.
//!
//! Supported inputs:
//!
//! * calibration text (`P0`..`P3`, `R0_rect`, `Tr_velo_to_cam`; other keys ignored)
//! * velodyne scans (little-endian `f32` quadruples `x y z reflectance`)
//! * 2D detections, one per line: `class score x1 y1 x2 y2`
//! * KITTI `label_2` object labels (used to derive ground-truth stereo boxes)
//! * 8-bit grayscale or RGB PNG images
//!
//! Output formats are line oriented with a fixed field order and Rust's
//! shortest round-trip float formatting, so identical inputs always produce
//! identical bytes. See `docs/formats.md` in the repository for the layouts.

use std::collections::BTreeMap;
use std::io::Write;

use image::{DynamicImage, GrayImage, ImageFormat, Luma};
use nalgebra::{Matrix3, Matrix3x4, Vector3};
use thiserror::Error;

use crate::matcher::{Algorithm, CostKind, MatchPair, MatchSet, Segment};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("missing calibration key `{0}`")]
    MissingKey(String),
    #[error("line {line}: malformed number `{token}`")]
    MalformedNumber { line: usize, token: String },
    #[error("line {line}: `{key}` expects {expected} values, found {found}")]
    WrongArity {
        line: usize,
        key: String,
        expected: usize,
        found: usize,
    },
    #[error("R0_rect is not orthonormal (max deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("velodyne blob of {0} bytes is not a whole number of 16-byte records")]
    TruncatedRecord(usize),
    #[error("non-finite value in velodyne point {index}")]
    NonFiniteValue { index: usize },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: degenerate box (x2 <= x1 or y2 <= y1)")]
    DegenerateBox { line: usize },
    #[error("point index {index} out of range for a cloud of {len} points")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("image decode failed: {0}")]
    Image(#[from] image::ImageError),
    #[error("write failed: {0}")]
    SinkFailure(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, FormatError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    Left,
    Right,
}

impl View {
    /// KITTI camera id of the color camera for this view.
    pub fn camera_id(self) -> u8 {
        match self {
            View::Left => 2,
            View::Right => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Left => "left",
            View::Right => "right",
        }
    }
}

// ---------------------------------------------------------------------------
// Calibration

#[derive(Debug, Clone, PartialEq)]
pub struct RawCalibration {
    /// Rectified projection matrices keyed by camera id (0..=3).
    pub p_rect: BTreeMap<u8, Matrix3x4<f64>>,
    pub r0_rect: Matrix3<f64>,
    pub tr_velo_to_cam: Matrix3x4<f64>,
}

impl RawCalibration {
    pub fn p_rect(&self, view: View) -> &Matrix3x4<f64> {
        // parse_calibration guarantees P2 and P3
        &self.p_rect[&view.camera_id()]
    }
}

const R0_ORTHONORMAL_TOL: f64 = 1e-3;

fn parse_values(line_no: usize, key: &str, rest: &str, expected: usize) -> Result<Vec<f64>> {
    let mut values = Vec::with_capacity(expected);
    for token in rest.split_whitespace() {
        let v: f64 = token.parse().map_err(|_| FormatError::MalformedNumber {
            line: line_no,
            token: token.to_string(),
        })?;
        if !v.is_finite() {
            return Err(FormatError::MalformedNumber {
                line: line_no,
                token: token.to_string(),
            });
        }
        values.push(v);
    }
    if values.len() != expected {
        return Err(FormatError::WrongArity {
            line: line_no,
            key: key.to_string(),
            expected,
            found: values.len(),
        });
    }
    Ok(values)
}

/// Parses a KITTI object calibration file.
///
/// Lines are `key: values`. `P0`..`P3` (12 values), `R0_rect` (9) and
/// `Tr_velo_to_cam` (12) are read; anything else is skipped. `P2`, `P3`,
/// `R0_rect` and `Tr_velo_to_cam` are required.
pub fn parse_calibration(text: &str) -> Result<RawCalibration> {
    let mut p_rect = BTreeMap::new();
    let mut r0_rect = None;
    let mut tr = None;

    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let key = key.trim();
        match key {
            "P0" | "P1" | "P2" | "P3" => {
                let v = parse_values(line_no, key, rest, 12)?;
                let cam = key.as_bytes()[1] - b'0';
                p_rect.insert(cam, Matrix3x4::from_row_slice(&v));
            }
            "R0_rect" | "R_rect" => {
                let v = parse_values(line_no, key, rest, 9)?;
                r0_rect = Some(Matrix3::from_row_slice(&v));
            }
            "Tr_velo_to_cam" | "Tr_velo_cam" => {
                let v = parse_values(line_no, key, rest, 12)?;
                tr = Some(Matrix3x4::from_row_slice(&v));
            }
            _ => {}
        }
    }

    for key in ["P2", "P3"] {
        let cam = key.as_bytes()[1] - b'0';
        if !p_rect.contains_key(&cam) {
            return Err(FormatError::MissingKey(key.to_string()));
        }
    }
    let r0_rect = r0_rect.ok_or_else(|| FormatError::MissingKey("R0_rect".into()))?;
    let tr_velo_to_cam = tr.ok_or_else(|| FormatError::MissingKey("Tr_velo_to_cam".into()))?;

    let deviation = (r0_rect * r0_rect.transpose() - Matrix3::identity()).abs().max();
    if deviation > R0_ORTHONORMAL_TOL {
        return Err(FormatError::NotOrthonormal(deviation));
    }

    Ok(RawCalibration {
        p_rect,
        r0_rect,
        tr_velo_to_cam,
    })
}

fn push_row_major(out: &mut String, values: impl Iterator<Item = f64>) {
    for v in values {
        out.push(' ');
        out.push_str(&format!("{v:e}"));
    }
    out.push('\n');
}

/// Serializes a calibration in KITTI layout. Values use the shortest
/// exponent form that parses back to the same `f64`.
pub fn format_calibration(raw: &RawCalibration) -> String {
    let mut out = String::new();
    for (cam, p) in &raw.p_rect {
        out.push_str(&format!("P{cam}:"));
        push_row_major(&mut out, p.transpose().iter().copied());
    }
    out.push_str("R0_rect:");
    push_row_major(&mut out, raw.r0_rect.transpose().iter().copied());
    out.push_str("Tr_velo_to_cam:");
    push_row_major(&mut out, raw.tr_velo_to_cam.transpose().iter().copied());
    out
}

// ---------------------------------------------------------------------------
// Velodyne

/// A LiDAR scan in the velodyne frame. Coordinates are meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub reflectance: Vec<f32>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: [f32; 3], reflectance: f32) {
        self.points.push(p);
        self.reflectance.push(reflectance);
    }

    pub fn point(&self, index: usize) -> Vector3<f64> {
        let [x, y, z] = self.points[index];
        Vector3::new(x as f64, y as f64, z as f64)
    }
}

/// Decodes a velodyne blob, returning the cloud and the number of
/// reflectance values that had to be clamped into `[0, 1]`.
pub fn read_velodyne_counted(bytes: &[u8]) -> Result<(PointCloud, usize)> {
    if bytes.len() % 16 != 0 {
        return Err(FormatError::TruncatedRecord(bytes.len()));
    }
    let n = bytes.len() / 16;
    let mut cloud = PointCloud {
        points: Vec::with_capacity(n),
        reflectance: Vec::with_capacity(n),
    };
    let mut clamped = 0;
    for (index, record) in bytes.chunks_exact(16).enumerate() {
        let mut v = [0f32; 4];
        for (k, word) in record.chunks_exact(4).enumerate() {
            v[k] = f32::from_le_bytes([word[0], word[1], word[2], word[3]]);
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(FormatError::NonFiniteValue { index });
        }
        let r = v[3].clamp(0.0, 1.0);
        if r != v[3] {
            clamped += 1;
        }
        cloud.push([v[0], v[1], v[2]], r);
    }
    Ok((cloud, clamped))
}

/// Decodes a velodyne blob. Out-of-range reflectance is clamped and
/// reported through `log::warn!`.
pub fn read_velodyne(bytes: &[u8]) -> Result<PointCloud> {
    let (cloud, clamped) = read_velodyne_counted(bytes)?;
    if clamped > 0 {
        log::warn!("clamped {clamped} reflectance values into [0, 1]");
    }
    Ok(cloud)
}

pub fn write_velodyne(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (p, r) in cloud.points.iter().zip(&cloud.reflectance) {
        for v in [p[0], p[1], p[2], *r] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Detections

#[derive(Debug, Clone, PartialEq)]
pub struct Detection2D {
    pub view: View,
    pub class_label: String,
    pub score: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

fn parse_field(line: usize, token: &str) -> Result<f64> {
    match token.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(FormatError::MalformedNumber {
            line,
            token: token.to_string(),
        }),
    }
}

/// Reads `class score x1 y1 x2 y2` lines. Blank lines and `#` comments are
/// skipped; the position in the returned vector is the RoI id.
pub fn read_detections(text: &str, view: View) -> Result<Vec<Detection2D>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        if tokens.len() != 6 {
            return Err(FormatError::MalformedLine {
                line,
                reason: format!("expected 6 fields, found {}", tokens.len()),
            });
        }
        let score = parse_field(line, tokens[1])?;
        if !(0.0..=1.0).contains(&score) {
            return Err(FormatError::MalformedLine {
                line,
                reason: format!("score {score} outside [0, 1]"),
            });
        }
        let x1 = parse_field(line, tokens[2])?;
        let y1 = parse_field(line, tokens[3])?;
        let x2 = parse_field(line, tokens[4])?;
        let y2 = parse_field(line, tokens[5])?;
        if x2 <= x1 || y2 <= y1 {
            return Err(FormatError::DegenerateBox { line });
        }
        out.push(Detection2D {
            view,
            class_label: tokens[0].to_string(),
            score,
            x1,
            y1,
            x2,
            y2,
        });
    }
    Ok(out)
}

pub fn format_detections(dets: &[Detection2D]) -> String {
    dets.iter()
        .map(|d| {
            format!(
                "{} {} {} {} {} {}\n",
                d.class_label, d.score, d.x1, d.y1, d.x2, d.y2
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// KITTI object labels

/// One row of a KITTI `label_2` file. 3D fields are in rectified camera
/// coordinates; `dimensions` is (height, width, length).
#[derive(Debug, Clone, PartialEq)]
pub struct KittiLabel {
    pub class_label: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    pub bbox: [f64; 4],
    pub dimensions: [f64; 3],
    pub location: [f64; 3],
    pub rotation_y: f64,
}

pub fn read_kitti_labels(text: &str) -> Result<Vec<KittiLabel>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() < 15 {
            return Err(FormatError::MalformedLine {
                line,
                reason: format!("expected at least 15 label fields, found {}", tokens.len()),
            });
        }
        let f = |k: usize| parse_field(line, tokens[k]);
        let occluded = tokens[2]
            .parse::<i32>()
            .map_err(|_| FormatError::MalformedNumber {
                line,
                token: tokens[2].to_string(),
            })?;
        out.push(KittiLabel {
            class_label: tokens[0].to_string(),
            truncated: f(1)?,
            occluded,
            alpha: f(3)?,
            bbox: [f(4)?, f(5)?, f(6)?, f(7)?],
            dimensions: [f(8)?, f(9)?, f(10)?],
            location: [f(11)?, f(12)?, f(13)?],
            rotation_y: f(14)?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Match and segment outputs

const MATCHES_MAGIC: &str = "# sfmatch matches v1";
const SEGMENTS_MAGIC: &str = "# sfmatch segments v1";

/// Writes a match set. Layout:
///
/// ```text
/// # sfmatch matches v1
/// algorithm <name>
/// count <n>
/// <left_idx> <right_idx> <algorithm> <cost_kind> <cost> <n_intersection> <idx>...
/// ```
pub fn write_matches<W: Write>(matches: &MatchSet, sink: &mut W) -> Result<()> {
    let name = matches.algorithm.name();
    writeln!(sink, "{MATCHES_MAGIC}")?;
    writeln!(sink, "algorithm {name}")?;
    writeln!(sink, "count {}", matches.pairs.len())?;
    for p in &matches.pairs {
        write!(
            sink,
            "{} {} {} {} {} {}",
            p.left_idx,
            p.right_idx,
            name,
            p.cost_kind.name(),
            p.cost,
            p.n_intersection
        )?;
        for idx in &p.intersection_indices {
            write!(sink, " {idx}")?;
        }
        writeln!(sink)?;
    }
    Ok(())
}

fn header_value<'a>(line: Option<(usize, &'a str)>, key: &str) -> Result<&'a str> {
    let (i, line) = line.ok_or_else(|| FormatError::MalformedLine {
        line: 0,
        reason: format!("missing `{key}` header"),
    })?;
    line.strip_prefix(key)
        .map(str::trim)
        .ok_or_else(|| FormatError::MalformedLine {
            line: i + 1,
            reason: format!("expected `{key}` header"),
        })
}

fn parse_usize(line: usize, token: &str) -> Result<usize> {
    token.parse().map_err(|_| FormatError::MalformedNumber {
        line,
        token: token.to_string(),
    })
}

/// Inverse of [`write_matches`].
pub fn parse_matches(text: &str) -> Result<MatchSet> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == MATCHES_MAGIC => {}
        _ => {
            return Err(FormatError::MalformedLine {
                line: 1,
                reason: "not a match file".into(),
            })
        }
    }
    let alg_name = header_value(lines.next(), "algorithm")?;
    let algorithm = Algorithm::from_name(alg_name).ok_or_else(|| FormatError::MalformedLine {
        line: 2,
        reason: format!("unknown algorithm `{alg_name}`"),
    })?;
    let count = parse_usize(3, header_value(lines.next(), "count")?)?;

    let mut pairs = Vec::with_capacity(count);
    for (i, raw) in lines {
        let line = i + 1;
        let t: Vec<&str> = raw.split_whitespace().collect();
        if t.len() < 6 {
            return Err(FormatError::MalformedLine {
                line,
                reason: "truncated match record".into(),
            });
        }
        if t[2] != alg_name {
            return Err(FormatError::MalformedLine {
                line,
                reason: format!("record algorithm `{}` differs from header", t[2]),
            });
        }
        let cost_kind = CostKind::from_name(t[3]).ok_or_else(|| FormatError::MalformedLine {
            line,
            reason: format!("unknown cost kind `{}`", t[3]),
        })?;
        let n_intersection = parse_usize(line, t[5])?;
        let intersection_indices = t[6..]
            .iter()
            .map(|s| {
                s.parse::<u32>().map_err(|_| FormatError::MalformedNumber {
                    line,
                    token: s.to_string(),
                })
            })
            .collect::<Result<Vec<u32>>>()?;
        if intersection_indices.len() != n_intersection {
            return Err(FormatError::MalformedLine {
                line,
                reason: "index count disagrees with n_intersection".into(),
            });
        }
        pairs.push(MatchPair {
            left_idx: parse_usize(line, t[0])?,
            right_idx: parse_usize(line, t[1])?,
            cost: parse_field(line, t[4])?,
            cost_kind,
            n_intersection,
            intersection_indices,
        });
    }
    if pairs.len() != count {
        return Err(FormatError::MalformedLine {
            line: 3,
            reason: format!("header count {count}, found {} records", pairs.len()),
        });
    }
    Ok(MatchSet { algorithm, pairs })
}

/// Writes segmented point clouds. Layout:
///
/// ```text
/// # sfmatch segments v1
/// count <n>
/// segment <left_idx> <right_idx> <class> <score> <n_points>
/// <x> <y> <z> <reflectance>      (n_points lines)
/// ```
pub fn write_segments<W: Write>(segments: &[Segment], cloud: &PointCloud, sink: &mut W) -> Result<()> {
    for s in segments {
        if let Some(&bad) = s.indices.iter().find(|&&i| i as usize >= cloud.len()) {
            return Err(FormatError::IndexOutOfRange {
                index: bad as usize,
                len: cloud.len(),
            });
        }
    }
    writeln!(sink, "{SEGMENTS_MAGIC}")?;
    writeln!(sink, "count {}", segments.len())?;
    for s in segments {
        writeln!(
            sink,
            "segment {} {} {} {} {}",
            s.left_idx,
            s.right_idx,
            s.class_label,
            s.score,
            s.indices.len()
        )?;
        for &i in &s.indices {
            let [x, y, z] = cloud.points[i as usize];
            writeln!(sink, "{x} {y} {z} {}", cloud.reflectance[i as usize])?;
        }
    }
    Ok(())
}

/// A segment read back from a segments file.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    pub left_idx: usize,
    pub right_idx: usize,
    pub class_label: String,
    pub score: f64,
    pub points: Vec<[f32; 4]>,
}

pub fn parse_segments(text: &str) -> Result<Vec<SegmentRecord>> {
    let mut lines = text.lines().enumerate().peekable();
    match lines.next() {
        Some((_, l)) if l == SEGMENTS_MAGIC => {}
        _ => {
            return Err(FormatError::MalformedLine {
                line: 1,
                reason: "not a segments file".into(),
            })
        }
    }
    let count = parse_usize(2, header_value(lines.next(), "count")?)?;
    let mut out = Vec::with_capacity(count);
    while let Some((i, raw)) = lines.next() {
        let line = i + 1;
        let t: Vec<&str> = raw.split_whitespace().collect();
        if t.len() != 6 || t[0] != "segment" {
            return Err(FormatError::MalformedLine {
                line,
                reason: "expected segment header".into(),
            });
        }
        let n = parse_usize(line, t[5])?;
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let (j, raw) = lines.next().ok_or_else(|| FormatError::MalformedLine {
                line,
                reason: "segment truncated".into(),
            })?;
            let v: Vec<f32> = raw
                .split_whitespace()
                .map(|s| {
                    s.parse::<f32>().map_err(|_| FormatError::MalformedNumber {
                        line: j + 1,
                        token: s.to_string(),
                    })
                })
                .collect::<Result<_>>()?;
            if v.len() != 4 {
                return Err(FormatError::MalformedLine {
                    line: j + 1,
                    reason: "expected x y z reflectance".into(),
                });
            }
            points.push([v[0], v[1], v[2], v[3]]);
        }
        out.push(SegmentRecord {
            left_idx: parse_usize(line, t[1])?,
            right_idx: parse_usize(line, t[2])?,
            class_label: t[3].to_string(),
            score: parse_field(line, t[4])?,
            points,
        });
    }
    if out.len() != count {
        return Err(FormatError::MalformedLine {
            line: 2,
            reason: format!("header count {count}, found {} segments", out.len()),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Images

/// Luma weights applied to RGB input.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    y.round().clamp(0.0, 255.0) as u8
}

fn to_gray(img: DynamicImage) -> GrayImage {
    match img {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            let rgb = other.to_rgb8();
            GrayImage::from_fn(rgb.width(), rgb.height(), |x, y| {
                let p = rgb.get_pixel(x, y).0;
                Luma([luma(p[0], p[1], p[2])])
            })
        }
    }
}

/// Decodes a PNG into an 8-bit grayscale raster.
pub fn decode_gray_png(bytes: &[u8]) -> Result<GrayImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    Ok(to_gray(img))
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

// ---------------------------------------------------------------------------
// Frames

/// Undecoded inputs of one stereo frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBytes {
    pub calib: String,
    pub velodyne: Vec<u8>,
    pub left_detections: String,
    pub right_detections: String,
    pub images: Option<(Vec<u8>, Vec<u8>)>,
    /// Used for box clipping when no images are supplied.
    pub image_size: (u32, u32),
}

/// Decoded inputs of one stereo frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub calib: RawCalibration,
    pub cloud: PointCloud,
    pub left_detections: Vec<Detection2D>,
    pub right_detections: Vec<Detection2D>,
    pub images: Option<(GrayImage, GrayImage)>,
    pub image_size: (u32, u32),
}

impl FrameBytes {
    pub fn decode(&self) -> Result<Frame> {
        let images = match &self.images {
            Some((l, r)) => Some((decode_gray_png(l)?, decode_gray_png(r)?)),
            None => None,
        };
        let image_size = images
            .as_ref()
            .map_or(self.image_size, |(l, _): &(GrayImage, GrayImage)| l.dimensions());
        Ok(Frame {
            calib: parse_calibration(&self.calib)?,
            cloud: read_velodyne(&self.velodyne)?,
            left_detections: read_detections(&self.left_detections, View::Left)?,
            right_detections: read_detections(&self.right_detections, View::Right)?,
            images,
            image_size,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL_CALIB: &str = "\
P2: 1 2 3 4 5 6 7 8 9 10 11 12
P3: 1 0 0 -1 0 1 0 0 0 0 1 0
R0_rect: 1 0 0 0 1 0 0 0 1
Tr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0
";

    #[test]
    fn calibration_values_echoed_row_major() {
        let raw = parse_calibration(MINIMAL_CALIB).unwrap();
        let p2 = raw.p_rect(View::Left);
        assert_eq!(p2[(0, 0)], 1.0);
        assert_eq!(p2[(0, 3)], 4.0);
        assert_eq!(p2[(1, 0)], 5.0);
        assert_eq!(p2[(2, 3)], 12.0);
    }

    #[test]
    fn calibration_missing_key() {
        let text: String = MINIMAL_CALIB
            .lines()
            .filter(|l| !l.starts_with("Tr_velo_to_cam"))
            .map(|l| format!("{l}\n"))
            .collect();
        match parse_calibration(&text) {
            Err(FormatError::MissingKey(k)) => assert_eq!(k, "Tr_velo_to_cam"),
            other => panic!("unexpected {other:?}"),
        }
        let no_p3: String = MINIMAL_CALIB.replace("P3:", "P9:");
        assert!(matches!(parse_calibration(&no_p3), Err(FormatError::MissingKey(k)) if k == "P3"));
    }

    #[test]
    fn calibration_malformed_and_arity() {
        let bad = MINIMAL_CALIB.replace("P2: 1 2", "P2: 1 x");
        assert!(matches!(
            parse_calibration(&bad),
            Err(FormatError::MalformedNumber { line: 1, .. })
        ));
        let short = MINIMAL_CALIB.replace("R0_rect: 1 0 0 0 1 0 0 0 1", "R0_rect: 1 0 0");
        assert!(matches!(parse_calibration(&short), Err(FormatError::WrongArity { .. })));
        let skew = MINIMAL_CALIB.replace("R0_rect: 1 0 0 0 1 0 0 0 1", "R0_rect: 1 0.1 0 0 1 0 0 0 1");
        assert!(matches!(parse_calibration(&skew), Err(FormatError::NotOrthonormal(_))));
    }

    #[test]
    fn calibration_tolerates_whitespace_and_unknown_keys() {
        let text = format!("Tr_imu_to_velo: 1 2 3\n\n   {}", MINIMAL_CALIB.replace(' ', "\t "));
        assert!(parse_calibration(&text).is_ok());
    }

    #[test]
    fn calibration_format_round_trip() {
        let text = include_str!("../tests/data/kitti_calib_2011_09_26.txt");
        let raw = parse_calibration(text).unwrap();
        let again = parse_calibration(&format_calibration(&raw)).unwrap();
        assert_eq!(raw, again);
    }

    #[test]
    fn velodyne_two_points() {
        let mut bytes = Vec::new();
        for v in [1f32, 2., 3., 0.5, 4., 5., 6., 0.] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let cloud = read_velodyne(&bytes).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.points[0], [1.0, 2.0, 3.0]);
        assert_eq!(cloud.reflectance[0], 0.5);
        assert_eq!(cloud.points[1], [4.0, 5.0, 6.0]);
        assert!(read_velodyne(&[]).unwrap().is_empty());
    }

    #[test]
    fn velodyne_errors_and_clamping() {
        assert!(matches!(read_velodyne(&[0u8; 17]), Err(FormatError::TruncatedRecord(17))));
        let mut bytes = Vec::new();
        for v in [0f32, 0., f32::NAN, 0.] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(read_velodyne(&bytes), Err(FormatError::NonFiniteValue { index: 0 })));

        let mut bytes = Vec::new();
        for v in [0f32, 0., 0., 1.5, 0., 0., 0., -0.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let (cloud, clamped) = read_velodyne_counted(&bytes).unwrap();
        assert_eq!(clamped, 2);
        assert_eq!(cloud.reflectance, vec![1.0, 0.0]);
    }

    #[test]
    fn detections_parse_in_order() {
        let dets = read_detections("Car 0.9 100 100 200 180\nPedestrian\t0.5\t10 20 30 80\n", View::Left).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].class_label, "Car");
        assert_eq!(dets[0].x2, 200.0);
        assert_eq!(dets[1].class_label, "Pedestrian");
        assert_eq!(dets[1].view, View::Left);
    }

    #[test]
    fn detection_errors() {
        assert!(matches!(
            read_detections("Car 0.9 200 100 100 180", View::Left),
            Err(FormatError::DegenerateBox { line: 1 })
        ));
        assert!(matches!(
            read_detections("Car 0.9 100 100 200", View::Left),
            Err(FormatError::MalformedLine { .. })
        ));
        assert!(matches!(
            read_detections("Car 1.5 100 100 200 180", View::Left),
            Err(FormatError::MalformedLine { .. })
        ));
        assert!(matches!(
            read_detections("Car 0.9 1OO 100 200 180", View::Left),
            Err(FormatError::MalformedNumber { .. })
        ));
    }

    #[test]
    fn kitti_label_row() {
        let row = "Car 0.00 0 -1.57 599.41 156.40 629.75 189.25 2.85 2.63 12.34 0.47 1.49 69.44 -1.56";
        let labels = read_kitti_labels(row).unwrap();
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].dimensions, [2.85, 2.63, 12.34]);
        assert_eq!(labels[0].location, [0.47, 1.49, 69.44]);
    }

    fn sample_matches() -> MatchSet {
        MatchSet {
            algorithm: Algorithm::Similarity,
            pairs: vec![MatchPair {
                left_idx: 0,
                right_idx: 1,
                cost: 0.8,
                cost_kind: CostKind::Ncc,
                n_intersection: 7,
                intersection_indices: vec![1, 4, 9, 10, 11, 40, 41],
            }],
        }
    }

    #[test]
    fn empty_matches_header_only() {
        let mut buf = Vec::new();
        write_matches(&MatchSet::new(Algorithm::IouEpipolar), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "# sfmatch matches v1\nalgorithm 3dces\ncount 0\n");
    }

    #[test]
    fn one_match_record() {
        let mut buf = Vec::new();
        write_matches(&sample_matches(), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let last = text.lines().last().unwrap();
        assert_eq!(last, "0 1 rsc ncc 0.8 7 1 4 9 10 11 40 41");

        let mut again = Vec::new();
        write_matches(&sample_matches(), &mut again).unwrap();
        assert_eq!(buf, again);
        assert_eq!(parse_matches(&text).unwrap(), sample_matches());
    }

    #[test]
    fn segments_carry_class_and_score() {
        let mut cloud = PointCloud::default();
        for i in 0..6 {
            cloud.push([i as f32, 0.0, 1.0], 0.1 * i as f32);
        }
        let seg = Segment {
            left_idx: 0,
            right_idx: 3,
            class_label: "Car".into(),
            score: 0.75,
            indices: vec![2, 5],
        };
        let mut buf = Vec::new();
        write_segments(std::slice::from_ref(&seg), &cloud, &mut buf).unwrap();
        let recs = parse_segments(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].class_label, "Car");
        assert_eq!(recs[0].score, 0.75);
        assert_eq!(recs[0].points.len(), 2);
        assert_eq!(recs[0].points[1][0], 5.0);

        let mut buf = Vec::new();
        write_segments(&[], &cloud, &mut buf).unwrap();
        assert!(parse_segments(std::str::from_utf8(&buf).unwrap()).unwrap().is_empty());

        let bad = Segment { indices: vec![6], ..seg };
        assert!(matches!(
            write_segments(&[bad], &cloud, &mut Vec::new()),
            Err(FormatError::IndexOutOfRange { index: 6, len: 6 })
        ));
    }

    #[test]
    fn rgb_png_converted_with_luma_weights() {
        let rgb = image::RgbImage::from_pixel(2, 1, image::Rgb([200, 100, 50]));
        let mut buf = std::io::Cursor::new(Vec::new());
        rgb.write_to(&mut buf, ImageFormat::Png).unwrap();
        let gray = decode_gray_png(buf.get_ref()).unwrap();
        assert_eq!(gray.get_pixel(0, 0).0[0], luma(200, 100, 50));
        assert_eq!(luma(200, 100, 50), 124); // 59.8 + 58.7 + 5.7
    }
}

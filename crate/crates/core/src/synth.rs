//! Seeded synthetic stereo + LiDAR scenes with known correspondences.
//!
//! The rig is rectified: both cameras share `K`, the right camera sits
//! `baseline` meters along +x, and the velodyne frame follows the KITTI axis
//! convention (x forward, y left, z up). Objects are axis-aligned boxes
//! standing on a ground plane 1.65 m below the cameras. LiDAR returns are
//! sampled uniformly on box faces plus uniform clutter; the images are
//! procedural textures painted over each object's footprint.
//!
//! All randomness comes from one `ChaCha8Rng` seeded with `SceneParams::seed`,
//! drawn in a fixed order, so a seed reproduces a scene exactly.

use std::path::Path;

use image::{GrayImage, Luma};
use nalgebra::{Matrix3, Matrix3x4, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::calib::{derive_calibration, CalibrationSet};
use crate::kitti_io::{self, Detection2D, FrameBytes, PointCloud, RawCalibration, View};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene parameters: {0}")]
    InvalidParams(String),
    #[error("could not place object {object} within the overlap cap after {attempts} attempts")]
    PlacementFailure { object: usize, attempts: usize },
    #[error("scene i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Format(#[from] kitti_io::FormatError),
}

/// Height of the cameras above the ground plane, meters.
pub const CAMERA_HEIGHT: f64 = 1.65;
const PLACEMENT_ATTEMPTS: usize = 500;
const EDGE_MARGIN_PX: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub n_objects: usize,
    /// Range of object center depths, meters.
    pub depth_range: (f64, f64),
    pub baseline: f64,
    pub focal: f64,
    pub image_size: (u32, u32),
    pub points_per_object: usize,
    pub clutter_points: usize,
    /// Uniform jitter (±px) applied independently to every box edge.
    pub bbox_noise_px: f64,
    /// Largest fraction of the smaller box that another object's box may
    /// cover, in either view. This also caps the pairwise 2D IoU.
    pub max_overlap: f64,
    /// Objects left undetected in the right view.
    pub missing_right: usize,
    pub render_images: bool,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            n_objects: 3,
            depth_range: (8.0, 40.0),
            baseline: 0.54,
            focal: 700.0,
            image_size: (1242, 375),
            points_per_object: 300,
            clutter_points: 2000,
            bbox_noise_px: 0.0,
            max_overlap: 0.05,
            missing_right: 0,
            render_images: true,
            seed: 0,
        }
    }
}

impl SceneParams {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidParams(m.to_string()));
        if !(self.baseline > 0.0) {
            return bad("baseline must be positive");
        }
        let (near, far) = self.depth_range;
        if !(near > 0.0 && far > near) {
            return bad("depth range must be positive and increasing");
        }
        if !(self.focal > 0.0) {
            return bad("focal length must be positive");
        }
        if self.missing_right > self.n_objects {
            return bad("missing_right exceeds object count");
        }
        if !(self.bbox_noise_px >= 0.0) {
            return bad("bbox noise must be >= 0");
        }
        Ok(())
    }
}

/// Axis-aligned box in rectified camera coordinates (y down).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class_label: String,
    pub center: Vector3<f64>,
    /// Extent along camera x, y, z.
    pub size: Vector3<f64>,
}

impl SceneObject {
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let h = self.size * 0.5;
        let mut out = [Vector3::zeros(); 8];
        for (k, c) in out.iter_mut().enumerate() {
            let s = |bit: usize| if k & bit == 0 { -1.0 } else { 1.0 };
            *c = self.center + Vector3::new(s(1) * h.x, s(2) * h.y, s(4) * h.z);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub params: SceneParams,
    pub raw_calib: RawCalibration,
    pub calib: CalibrationSet,
    pub objects: Vec<SceneObject>,
    pub cloud: PointCloud,
    /// Left detections; index `i` belongs to object `i`.
    pub left_detections: Vec<Detection2D>,
    pub right_detections: Vec<Detection2D>,
    /// `(left_idx, right_idx)` sorted by left index.
    pub gt_pairs: Vec<(usize, usize)>,
    pub left_image: Option<GrayImage>,
    pub right_image: Option<GrayImage>,
}

impl SyntheticScene {
    pub fn seed(&self) -> u64 {
        self.params.seed
    }
}

/// Rectified rig calibration: `P2 = K[I|0]`, `P3 = K[I|(-b,0,0)]`.
pub fn rig_calibration(focal: f64, image_size: (u32, u32), baseline: f64) -> RawCalibration {
    let k = Matrix3::new(
        focal,
        0.0,
        image_size.0 as f64 / 2.0,
        0.0,
        focal,
        image_size.1 as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );
    let mut p2 = Matrix3x4::zeros();
    p2.fixed_view_mut::<3, 3>(0, 0).copy_from(&k);
    let mut p3 = p2;
    p3.set_column(3, &(k * Vector3::new(-baseline, 0.0, 0.0)));
    let mut p_rect = std::collections::BTreeMap::new();
    p_rect.insert(2, p2);
    p_rect.insert(3, p3);
    // velodyne: x forward, y left, z up; mounted slightly behind/above the cameras
    #[rustfmt::skip]
    let tr = Matrix3x4::new(
        0.0, -1.0, 0.0, 0.0,
        0.0, 0.0, -1.0, -0.08,
        1.0, 0.0, 0.0, -0.27,
    );
    RawCalibration {
        p_rect,
        r0_rect: Matrix3::identity(),
        tr_velo_to_cam: tr,
    }
}

fn cam_to_velo(raw: &RawCalibration, x: &Vector3<f64>) -> [f32; 3] {
    let r = raw.tr_velo_to_cam.fixed_view::<3, 3>(0, 0);
    let t = raw.tr_velo_to_cam.column(3);
    let v = r.transpose() * (raw.r0_rect.transpose() * x - t);
    [v.x as f32, v.y as f32, v.z as f32]
}

/// Tight image box of a set of camera-frame points, `None` if any point falls
/// outside the image (with a small margin).
fn tight_box(calib: &CalibrationSet, pts: &[Vector3<f64>], view: View, size: (u32, u32)) -> Option<[f64; 4]> {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for p in pts {
        let pr = calib.project_rect(p, view);
        if !pr.valid {
            return None;
        }
        b = [b[0].min(pr.u), b[1].min(pr.v), b[2].max(pr.u), b[3].max(pr.v)];
    }
    let inside = b[0] >= EDGE_MARGIN_PX
        && b[1] >= EDGE_MARGIN_PX
        && b[2] <= size.0 as f64 - EDGE_MARGIN_PX
        && b[3] <= size.1 as f64 - EDGE_MARGIN_PX;
    inside.then_some(b)
}

/// Intersection area over the smaller box's area.
fn coverage(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let smaller = ((a[2] - a[0]) * (a[3] - a[1])).min((b[2] - b[0]) * (b[3] - b[1]));
    if smaller > 0.0 {
        iw * ih / smaller
    } else {
        0.0
    }
}

struct Texture {
    freq: [f64; 2],
    phase: [f64; 2],
    blocks: [bool; 16],
}

impl Texture {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Texture {
            freq: [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)],
            phase: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
            blocks: std::array::from_fn(|_| rng.gen_bool(0.5)),
        }
    }

    /// Intensity at normalized box coordinates `(s, t) ∈ [0,1]²`.
    fn sample(&self, s: f64, t: f64) -> f64 {
        use std::f64::consts::TAU;
        let bi = ((s * 4.0).floor().clamp(0.0, 3.0) as usize) + 4 * ((t * 4.0).floor().clamp(0.0, 3.0) as usize);
        let block = if self.blocks[bi] { 0.12 } else { -0.12 };
        0.5 + 0.15 * (TAU * (self.freq[0] * s + self.phase[0])).sin()
            + 0.15 * (TAU * (self.freq[1] * t + self.phase[1])).sin()
            + block
    }
}

fn render(
    size: (u32, u32),
    footprints: &[[f64; 4]],
    textures: &[Texture],
    paint_order: &[usize],
    rng: &mut ChaCha8Rng,
) -> GrayImage {
    let mut img = GrayImage::from_fn(size.0, size.1, |_, _| Luma([rng.gen_range(118u8..=124)]));
    for &k in paint_order {
        let [x1, y1, x2, y2] = footprints[k];
        let (w, h) = (x2 - x1, y2 - y1);
        let xa = x1.ceil().max(0.0) as u32;
        let ya = y1.ceil().max(0.0) as u32;
        let xb = (x2.floor() as u32).min(size.0 - 1);
        let yb = (y2.floor() as u32).min(size.1 - 1);
        for y in ya..=yb {
            for x in xa..=xb {
                let v = textures[k].sample((x as f64 - x1) / w, (y as f64 - y1) / h);
                img.put_pixel(x, y, Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]));
            }
        }
    }
    img
}

const CLASSES: [(&str, [f64; 3]); 3] = [
    // (label, [width, height, length]) in meters
    ("Car", [1.6, 1.5, 3.9]),
    ("Pedestrian", [0.6, 1.75, 0.8]),
    ("Cyclist", [0.6, 1.7, 1.8]),
];

fn sample_on_faces(obj: &SceneObject, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let s = obj.size;
    // face pairs normal to x, y, z
    let areas = [s.y * s.z, s.x * s.z, s.x * s.y];
    let total: f64 = 2.0 * areas.iter().sum::<f64>();
    (0..n)
        .map(|_| {
            let mut pick = rng.gen_range(0.0..total);
            let mut axis = 0;
            while axis < 2 && pick >= 2.0 * areas[axis] {
                pick -= 2.0 * areas[axis];
                axis += 1;
            }
            let sign = if rng.gen_bool(0.5) { 0.5 } else { -0.5 };
            let mut local = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            local[axis] = sign;
            obj.center + local.component_mul(&s)
        })
        .collect()
}

fn jitter(b: [f64; 4], noise: f64, size: (u32, u32), rng: &mut ChaCha8Rng) -> [f64; 4] {
    if noise == 0.0 {
        return b;
    }
    let mut j: [f64; 4] = std::array::from_fn(|k| b[k] + rng.gen_range(-noise..=noise));
    j[0] = j[0].clamp(0.0, size.0 as f64 - 2.0);
    j[1] = j[1].clamp(0.0, size.1 as f64 - 2.0);
    j[2] = j[2].clamp(j[0] + 1.0, size.0 as f64);
    j[3] = j[3].clamp(j[1] + 1.0, size.1 as f64);
    j
}

fn detection(view: View, class_label: &str, score: f64, b: [f64; 4]) -> Detection2D {
    Detection2D {
        view,
        class_label: class_label.to_string(),
        score,
        x1: b[0],
        y1: b[1],
        x2: b[2],
        y2: b[3],
    }
}

pub fn generate_scene(params: &SceneParams) -> Result<SyntheticScene, SynthError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let raw_calib = rig_calibration(params.focal, params.image_size, params.baseline);
    let calib = derive_calibration(&raw_calib).expect("rig intrinsics are invertible");
    let size = params.image_size;
    let (near, far) = params.depth_range;

    let mut objects: Vec<SceneObject> = Vec::with_capacity(params.n_objects);
    let mut boxes: Vec<[[f64; 4]; 2]> = Vec::with_capacity(params.n_objects);
    let mut shells: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(params.n_objects);
    for object in 0..params.n_objects {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (label, dims) = CLASSES[rng.gen_range(0..CLASSES.len())];
            let scale = rng.gen_range(0.9..1.1);
            let (w, h, l) = (dims[0] * scale, dims[1] * scale, dims[2] * scale);
            let (sx, sz) = if rng.gen_bool(0.5) { (w, l) } else { (l, w) };
            let z = rng.gen_range(near..far);
            let half_fov = size.0 as f64 / 2.0 / params.focal;
            let x = rng.gen_range(-half_fov * z..half_fov * z);
            let obj = SceneObject {
                class_label: label.to_string(),
                center: Vector3::new(x, CAMERA_HEIGHT - h / 2.0, z),
                size: Vector3::new(sx, h, sz),
            };
            if obj.center.z - sz / 2.0 < 1.0 {
                continue;
            }
            let corners = obj.corners();
            if tight_box(&calib, &corners, View::Left, size).is_none()
                || tight_box(&calib, &corners, View::Right, size).is_none()
            {
                continue;
            }
            let shell = sample_on_faces(&obj, params.points_per_object.max(1), &mut rng);
            let (Some(lb), Some(rb)) = (
                tight_box(&calib, &shell, View::Left, size),
                tight_box(&calib, &shell, View::Right, size),
            ) else {
                continue;
            };
            let overlaps = boxes
                .iter()
                .any(|[ol, or]| coverage(ol, &lb) > params.max_overlap || coverage(or, &rb) > params.max_overlap);
            if overlaps {
                continue;
            }
            shells.push(shell);
            objects.push(obj);
            boxes.push([lb, rb]);
            placed = true;
            break;
        }
        if !placed {
            return Err(SynthError::PlacementFailure {
                object,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
    }

    let mut cloud = PointCloud::default();
    for shell in &shells {
        for p in shell.iter().take(params.points_per_object) {
            cloud.push(cam_to_velo(&raw_calib, p), rng.gen_range(0.0..1.0));
        }
    }
    for _ in 0..params.clutter_points {
        let x = rng.gen_range(-40.0..40.0);
        let z = rng.gen_range(-40.0..70.0);
        let y = if rng.gen_bool(0.5) {
            CAMERA_HEIGHT
        } else {
            rng.gen_range(-2.0..CAMERA_HEIGHT)
        };
        cloud.push(cam_to_velo(&raw_calib, &Vector3::new(x, y, z)), rng.gen_range(0.0..1.0));
    }

    let mut hidden: Vec<usize> = (0..objects.len()).collect();
    hidden.shuffle(&mut rng);
    hidden.truncate(params.missing_right);

    let mut left_detections = Vec::with_capacity(objects.len());
    let mut right_entries = Vec::with_capacity(objects.len());
    for (i, obj) in objects.iter().enumerate() {
        let score = rng.gen_range(0.5..1.0);
        let lb = jitter(boxes[i][0], params.bbox_noise_px, size, &mut rng);
        let rb = jitter(boxes[i][1], params.bbox_noise_px, size, &mut rng);
        left_detections.push(detection(View::Left, &obj.class_label, score, lb));
        if !hidden.contains(&i) {
            right_entries.push((i, detection(View::Right, &obj.class_label, score, rb)));
        }
    }
    right_entries.shuffle(&mut rng);
    let mut gt_pairs: Vec<(usize, usize)> = right_entries
        .iter()
        .enumerate()
        .map(|(j, (i, _))| (*i, j))
        .collect();
    gt_pairs.sort_unstable();
    let right_detections = right_entries.into_iter().map(|(_, d)| d).collect();

    let (left_image, right_image) = if params.render_images {
        let textures: Vec<Texture> = objects.iter().map(|_| Texture::draw(&mut rng)).collect();
        let mut order: Vec<usize> = (0..objects.len()).collect();
        order.sort_by(|&a, &b| objects[b].center.z.total_cmp(&objects[a].center.z));
        let lf: Vec<[f64; 4]> = boxes.iter().map(|b| b[0]).collect();
        let rf: Vec<[f64; 4]> = boxes.iter().map(|b| b[1]).collect();
        (
            Some(render(size, &lf, &textures, &order, &mut rng)),
            Some(render(size, &rf, &textures, &order, &mut rng)),
        )
    } else {
        (None, None)
    };

    Ok(SyntheticScene {
        params: params.clone(),
        raw_calib,
        calib,
        objects,
        cloud,
        left_detections,
        right_detections,
        gt_pairs,
        left_image,
        right_image,
    })
}

/// Ground-truth pairs in match-set order (sorted by left index).
pub fn gt_match_oracle(scene: &SyntheticScene) -> Vec<(usize, usize)> {
    scene.gt_pairs.clone()
}

/// File names used for a frame directory.
pub mod files {
    pub const CALIB: &str = "calib.txt";
    pub const VELODYNE: &str = "velodyne.bin";
    pub const LEFT_DETECTIONS: &str = "left.txt";
    pub const RIGHT_DETECTIONS: &str = "right.txt";
    pub const LEFT_IMAGE: &str = "left.png";
    pub const RIGHT_IMAGE: &str = "right.png";
    pub const GT_PAIRS: &str = "gt_pairs.txt";
}

/// Serializes the scene inputs into the formats `kitti_io` reads.
pub fn frame_bytes(scene: &SyntheticScene) -> Result<FrameBytes, SynthError> {
    let images = match (&scene.left_image, &scene.right_image) {
        (Some(l), Some(r)) => Some((kitti_io::encode_png(l)?, kitti_io::encode_png(r)?)),
        _ => None,
    };
    Ok(FrameBytes {
        calib: kitti_io::format_calibration(&scene.raw_calib),
        velodyne: kitti_io::write_velodyne(&scene.cloud),
        left_detections: kitti_io::format_detections(&scene.left_detections),
        right_detections: kitti_io::format_detections(&scene.right_detections),
        images,
        image_size: scene.params.image_size,
    })
}

/// Writes the scene as a frame directory in the same formats the CLI reads.
pub fn write_scene(scene: &SyntheticScene, dir: &Path) -> Result<(), SynthError> {
    let bytes = frame_bytes(scene)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(files::CALIB), &bytes.calib)?;
    std::fs::write(dir.join(files::VELODYNE), &bytes.velodyne)?;
    std::fs::write(dir.join(files::LEFT_DETECTIONS), &bytes.left_detections)?;
    std::fs::write(dir.join(files::RIGHT_DETECTIONS), &bytes.right_detections)?;
    if let Some((l, r)) = &bytes.images {
        std::fs::write(dir.join(files::LEFT_IMAGE), l)?;
        std::fs::write(dir.join(files::RIGHT_IMAGE), r)?;
    }
    let gt: String = scene.gt_pairs.iter().map(|(l, r)| format!("{l} {r}\n")).collect();
    std::fs::write(dir.join(files::GT_PAIRS), gt)?;
    Ok(())
}

//! Access to real KITTI object-benchmark frames for the data-dependent tests.
//!
//! Frames are read from `$KITTI_ROOT` (default `tests/data/kitti`) laid out as
//! `training/{calib,velodyne,label_2,image_2}/<id>.*`. `image_2` is optional
//! and only used for the image size.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use stereo_frustum::calib::derive_calibration;
use stereo_frustum::kitti_io::{self, Detection2D, KittiLabel, RawCalibration};
use stereo_frustum::{CalibrationSet, PointCloud, View};

pub fn root() -> PathBuf {
    std::env::var_os("KITTI_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/kitti"))
}

/// Frame ids with calib, velodyne and labels present, sorted.
pub fn frame_ids(root: &Path) -> Vec<String> {
    let training = root.join("training");
    let Ok(entries) = std::fs::read_dir(training.join("label_2")) else {
        return Vec::new();
    };
    let ids: BTreeSet<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(".txt").map(str::to_owned))
        .filter(|id| {
            training.join("calib").join(format!("{id}.txt")).is_file()
                && training.join("velodyne").join(format!("{id}.bin")).is_file()
        })
        .collect();
    ids.into_iter().collect()
}

pub struct KittiFrame {
    pub id: String,
    pub raw: RawCalibration,
    pub calib: CalibrationSet,
    pub velodyne_bytes: usize,
    pub cloud: PointCloud,
    pub labels: Vec<KittiLabel>,
    pub image_size: (u32, u32),
}

pub fn load(root: &Path, id: &str) -> KittiFrame {
    let training = root.join("training");
    let read = |dir: &str, ext: &str| std::fs::read(training.join(dir).join(format!("{id}.{ext}"))).unwrap();
    let raw = kitti_io::parse_calibration(&String::from_utf8(read("calib", "txt")).unwrap()).unwrap();
    let velodyne = read("velodyne", "bin");
    let cloud = kitti_io::read_velodyne(&velodyne).unwrap();
    let labels = kitti_io::read_kitti_labels(&String::from_utf8(read("label_2", "txt")).unwrap()).unwrap();
    let image_size = std::fs::read(training.join("image_2").join(format!("{id}.png")))
        .ok()
        .and_then(|b| kitti_io::decode_gray_png(&b).ok())
        .map_or((1242, 375), |i| i.dimensions());
    let calib = derive_calibration(&raw).unwrap();
    KittiFrame {
        id: id.to_string(),
        raw,
        calib,
        velodyne_bytes: velodyne.len(),
        cloud,
        labels,
        image_size,
    }
}

const OBJECT_CLASSES: [&str; 7] = ["Car", "Van", "Truck", "Pedestrian", "Person_sitting", "Cyclist", "Tram"];

/// Ground-truth boxes projected into both views, paired by index.
pub fn gt_detections(frame: &KittiFrame) -> (Vec<Detection2D>, Vec<Detection2D>) {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for l in frame.labels.iter().filter(|l| OBJECT_CLASSES.contains(&l.class_label.as_str())) {
        let boxes = (
            frame.calib.label_box(l, View::Left, frame.image_size),
            frame.calib.label_box(l, View::Right, frame.image_size),
        );
        let (Some(lb), Some(rb)) = boxes else {
            continue;
        };
        let det = |view, b: [f64; 4]| Detection2D {
            view,
            class_label: l.class_label.clone(),
            score: 1.0,
            x1: b[0],
            y1: b[1],
            x2: b[2],
            y2: b[3],
        };
        left.push(det(View::Left, lb));
        right.push(det(View::Right, rb));
    }
    (left, right)
}

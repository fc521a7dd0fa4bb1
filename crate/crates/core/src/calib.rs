//! Stereo geometry derived from a KITTI calibration.
//!
//! Rectified projection matrices have the form `P = [K | C]` with a shared
//! rotation, so the left-to-right relation is a pure translation
//! `t = K2⁻¹·C2 − K3⁻¹·C3` and the fundamental matrix is
//! `F = K3⁻ᵀ [t]× K2⁻¹`, satisfying `p3ᵀ F p2 = 0` for corresponding pixels.

use nalgebra::{Matrix3, Matrix3x4, Point2, Vector3, Vector4};
use rayon::prelude::*;
use thiserror::Error;

use crate::kitti_io::{KittiLabel, PointCloud, RawCalibration, View};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("intrinsic matrix of the {0:?} camera is singular")]
    SingularIntrinsics(View),
    #[error("epipolar line is degenerate (the point is the epipole)")]
    DegenerateLine,
}

/// Minimum camera-frame depth (m) for a projected point to count as valid.
pub const MIN_DEPTH: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub k_c2: Matrix3<f64>,
    pub k_c3: Matrix3<f64>,
    pub c_2: Vector3<f64>,
    pub c_3: Vector3<f64>,
    /// Translation from the left to the right camera frame, meters.
    pub t_c2_c3: Vector3<f64>,
    /// Fundamental matrix scaled so that its largest-magnitude entry is 1.
    pub f_mat: Matrix3<f64>,
    pub r0_rect: Matrix3<f64>,
    pub tr_velo_to_cam: Matrix3x4<f64>,
    pub p_rect2: Matrix3x4<f64>,
    pub p_rect3: Matrix3x4<f64>,
}

/// Line `a·u + b·v + c = 0` with `a² + b² = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl EpipolarLine {
    /// Normalizes homogeneous line coefficients. `scale` is the magnitude of
    /// the input that produced them and sets the degeneracy tolerance.
    pub fn from_coefficients(l: Vector3<f64>, scale: f64) -> Result<Self, GeometryError> {
        let norm = l.x.hypot(l.y);
        if !(norm > 1e-12 * scale.max(1.0)) {
            return Err(GeometryError::DegenerateLine);
        }
        let (mut a, mut b, mut c) = (l.x / norm, l.y / norm, l.z / norm);
        let flip = if c != 0.0 {
            c < 0.0
        } else if a != 0.0 {
            a < 0.0
        } else {
            b < 0.0
        };
        if flip {
            a = -a;
            b = -b;
            c = -c;
        }
        Ok(EpipolarLine { a, b, c })
    }

    pub fn distance(&self, p: Point2<f64>) -> f64 {
        point_line_distance(p, self)
    }
}

/// Pixel distance from `p` to a normalized line.
pub fn point_line_distance(p: Point2<f64>, e: &EpipolarLine) -> f64 {
    (e.a * p.x + e.b * p.y + e.c).abs()
}

/// One point of a velodyne cloud projected into an image. `u`, `v` are NaN
/// when `valid` is false.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

fn invert(k: &Matrix3<f64>, view: View) -> Result<Matrix3<f64>, GeometryError> {
    let scale = k.abs().max();
    let det = k.determinant();
    if !det.is_finite() || det.abs() <= 1e-12 * scale.powi(3) {
        return Err(GeometryError::SingularIntrinsics(view));
    }
    k.try_inverse().ok_or(GeometryError::SingularIntrinsics(view))
}

/// Builds the derived calibration: intrinsics, stereo translation and F.
pub fn derive_calibration(raw: &RawCalibration) -> Result<CalibrationSet, GeometryError> {
    let p2 = *raw.p_rect(View::Left);
    let p3 = *raw.p_rect(View::Right);
    let k_c2: Matrix3<f64> = p2.fixed_view::<3, 3>(0, 0).into_owned();
    let k_c3: Matrix3<f64> = p3.fixed_view::<3, 3>(0, 0).into_owned();
    let c_2: Vector3<f64> = p2.column(3).into_owned();
    let c_3: Vector3<f64> = p3.column(3).into_owned();

    let k2_inv = invert(&k_c2, View::Left)?;
    let k3_inv = invert(&k_c3, View::Right)?;
    let t_c2_c3 = k2_inv * c_2 - k3_inv * c_3;

    let mut f_mat = k3_inv.transpose() * skew(&t_c2_c3) * k2_inv;
    let max = f_mat.abs().max();
    if max > 0.0 {
        f_mat /= max;
    }

    Ok(CalibrationSet {
        k_c2,
        k_c3,
        c_2,
        c_3,
        t_c2_c3,
        f_mat,
        r0_rect: raw.r0_rect,
        tr_velo_to_cam: raw.tr_velo_to_cam,
        p_rect2: p2,
        p_rect3: p3,
    })
}

impl CalibrationSet {
    pub fn from_raw(raw: &RawCalibration) -> Result<Self, GeometryError> {
        derive_calibration(raw)
    }

    pub fn projection(&self, view: View) -> &Matrix3x4<f64> {
        match view {
            View::Left => &self.p_rect2,
            View::Right => &self.p_rect3,
        }
    }

    /// Stereo baseline length in meters.
    pub fn baseline(&self) -> f64 {
        self.t_c2_c3.norm()
    }

    /// Ratio of the smallest to the largest singular value of F.
    pub fn rank2_ratio(&self) -> f64 {
        let sv = self.f_mat.singular_values();
        sv.min() / sv.max()
    }

    /// Epipolar line in the right view of left pixel `l` (`e = F·l`).
    pub fn epipolar_line_l2r(&self, l: Point2<f64>) -> Result<EpipolarLine, GeometryError> {
        let h = Vector3::new(l.x, l.y, 1.0);
        EpipolarLine::from_coefficients(self.f_mat * h, h.norm())
    }

    /// Epipolar line in the left view of right pixel `r` (`e = Fᵀ·r`).
    pub fn epipolar_line_r2l(&self, r: Point2<f64>) -> Result<EpipolarLine, GeometryError> {
        let h = Vector3::new(r.x, r.y, 1.0);
        EpipolarLine::from_coefficients(self.f_mat.transpose() * h, h.norm())
    }

    /// Maps a velodyne point into the rectified reference camera frame.
    pub fn velo_to_rect(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r0_rect * (self.tr_velo_to_cam * x.push(1.0))
    }

    /// Projects a point given in rectified camera coordinates.
    pub fn project_rect(&self, x_cam: &Vector3<f64>, view: View) -> Projection {
        let depth = x_cam.z;
        let h = self.projection(view) * Vector4::new(x_cam.x, x_cam.y, x_cam.z, 1.0);
        if depth > MIN_DEPTH && h.z > 0.0 {
            Projection {
                u: h.x / h.z,
                v: h.y / h.z,
                depth,
                valid: true,
            }
        } else {
            Projection {
                u: f64::NAN,
                v: f64::NAN,
                depth,
                valid: false,
            }
        }
    }

    /// Projects every point of `cloud` into `view`; output index `i`
    /// corresponds to input point `i`.
    pub fn project_velo_to_image(&self, cloud: &PointCloud, view: View) -> Vec<Projection> {
        cloud
            .points
            .par_iter()
            .map(|p| {
                let x = Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
                self.project_rect(&self.velo_to_rect(&x), view)
            })
            .collect()
    }

    /// Image-space box `(x1, y1, x2, y2)` of a KITTI 3D label in `view`,
    /// clipped to `image_size`. `None` if any corner is behind the camera
    /// or the clipped box is empty.
    pub fn label_box(&self, label: &KittiLabel, view: View, image_size: (u32, u32)) -> Option<[f64; 4]> {
        let (mut x1, mut y1) = (f64::INFINITY, f64::INFINITY);
        let (mut x2, mut y2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for corner in box3d_corners(label) {
            let p = self.project_rect(&corner, view);
            if !p.valid {
                return None;
            }
            x1 = x1.min(p.u);
            y1 = y1.min(p.v);
            x2 = x2.max(p.u);
            y2 = y2.max(p.v);
        }
        let (w, h) = (image_size.0 as f64, image_size.1 as f64);
        let b = [x1.max(0.0), y1.max(0.0), x2.min(w), y2.min(h)];
        (b[2] > b[0] && b[3] > b[1]).then_some(b)
    }
}

/// Corners of a KITTI 3D box in rectified camera coordinates. The label
/// location is the bottom-face center; `y` points down.
pub fn box3d_corners(label: &KittiLabel) -> [Vector3<f64>; 8] {
    let [h, w, l] = label.dimensions;
    let [cx, cy, cz] = label.location;
    let (s, c) = label.rotation_y.sin_cos();
    let mut out = [Vector3::zeros(); 8];
    let mut k = 0;
    for dx in [-0.5, 0.5] {
        for dz in [-0.5, 0.5] {
            for dy in [0.0, -1.0] {
                let (x, y, z) = (dx * l, dy * h, dz * w);
                out[k] = Vector3::new(c * x + s * z + cx, y + cy, -s * x + c * z + cz);
                k += 1;
            }
        }
    }
    out
}

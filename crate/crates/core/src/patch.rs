//! RoI patches and zero-mean normalized cross-correlation.

use image::GrayImage;
use thiserror::Error;

use crate::frustum::BBox2D;

#[derive(Debug, Error, PartialEq)]
pub enum PatchError {
    #[error("box covers no image pixels")]
    EmptyPatch,
    #[error("patch has zero variance")]
    ZeroVariance,
    #[error("patch sizes differ: {0:?} vs {1:?}")]
    SizeMismatch((usize, usize), (usize, usize)),
}

/// Grayscale patch, row-major intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub width: usize,
    pub height: usize,
    pub intensities: Vec<f32>,
}

impl ImagePatch {
    pub fn new(width: usize, height: usize, intensities: Vec<f32>) -> Self {
        assert_eq!(width * height, intensities.len());
        ImagePatch {
            width,
            height,
            intensities,
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut v = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                v.push(f(x, y));
            }
        }
        ImagePatch::new(width, height, v)
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.intensities[y * self.width + x]
    }

    /// Bilinear resample to `width × height`. Corner samples map onto corner
    /// samples, so resampling to the same size is the identity.
    pub fn resize(&self, width: usize, height: usize) -> ImagePatch {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f32)> {
            (0..n_out)
                .map(|i| {
                    let src = if n_out > 1 {
                        (i * (n_in - 1)) as f64 / (n_out - 1) as f64
                    } else {
                        0.0
                    };
                    let i0 = (src.floor() as usize).min(n_in - 1);
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, (src - i0 as f64) as f32)
                })
                .collect()
        };
        let xs = axis(width, self.width);
        let ys = axis(height, self.height);
        let mut out = Vec::with_capacity(width * height);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
                let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        ImagePatch::new(width, height, out)
    }
}

/// Pixels whose integer coordinates fall inside the closed box extent.
pub fn extract_patch(image: &GrayImage, b: &BBox2D) -> Result<ImagePatch, PatchError> {
    let [x1, y1, x2, y2] = b.extent();
    let (w, h) = (image.width() as f64, image.height() as f64);
    let xa = x1.ceil().max(0.0);
    let ya = y1.ceil().max(0.0);
    let xb = x2.floor().min(w - 1.0);
    let yb = y2.floor().min(h - 1.0);
    if !(xb >= xa && yb >= ya) {
        return Err(PatchError::EmptyPatch);
    }
    let (xa, ya, xb, yb) = (xa as u32, ya as u32, xb as u32, yb as u32);
    let pw = (xb - xa + 1) as usize;
    let ph = (yb - ya + 1) as usize;
    let mut v = Vec::with_capacity(pw * ph);
    for y in ya..=yb {
        for x in xa..=xb {
            v.push(image.get_pixel(x, y).0[0] as f32 / 255.0);
        }
    }
    Ok(ImagePatch::new(pw, ph, v))
}

/// Resamples both patches to a common `size × size` square.
pub fn align_patches(a: &ImagePatch, b: &ImagePatch, size: usize) -> (ImagePatch, ImagePatch) {
    (a.resize(size, size), b.resize(size, size))
}

/// Zero-mean NCC of two equally sized patches, in `[-1, 1]`.
pub fn ncc(a: &ImagePatch, b: &ImagePatch) -> Result<f64, PatchError> {
    if a.width != b.width || a.height != b.height {
        return Err(PatchError::SizeMismatch((a.width, a.height), (b.width, b.height)));
    }
    let n = a.intensities.len() as f64;
    let mean = |p: &ImagePatch| p.intensities.iter().map(|&x| x as f64).sum::<f64>() / n;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.intensities.iter().zip(&b.intensities) {
        let (da, db) = (x as f64 - ma, y as f64 - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    // intensities live in [0, 1]; anything below this is rounding noise
    let eps = 1e-12 * n;
    if saa <= eps || sbb <= eps {
        return Err(PatchError::ZeroVariance);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

//! Bird's-eye-view image handling: float images with bilinear sampling,
//! the four-corner homography warp, and resizing.
//!
//! The road region is described by four corner points of a convex
//! quadrilateral in the source image. Warping solves the 3x3 homography
//! that carries the output square's corners onto those points (eight
//! correspondence equations, direct Gaussian elimination), then fills
//! each output pixel by sampling the source bilinearly. Mapping output
//! to source means every output pixel is defined and the source is
//! resampled exactly once.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// An RGB image with floating-point samples in [0, 1], interleaved
/// row-major: index `(y * width + x) * 3 + channel`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF32 {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageF32 {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("image dimensions must be nonzero"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "image data length {} does not match {width} x {height} x 3",
                data.len()
            )));
        }
        Ok(ImageF32 { width, height, data })
    }

    /// A solid-colour image.
    pub fn constant(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        ImageF32::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at a fractional position; coordinates outside the
    /// image clamp to the nearest edge pixel.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f32; 3] {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let mut out = [0.0f32; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let p00 = self.data[(y0 * self.width + x0) * 3 + c];
            let p10 = self.data[(y0 * self.width + x1) * 3 + c];
            let p01 = self.data[(y1 * self.width + x0) * 3 + c];
            let p11 = self.data[(y1 * self.width + x1) * 3 + c];
            let top = p00 + (p10 - p00) * fx;
            let bottom = p01 + (p11 - p01) * fx;
            *o = top + (bottom - top) * fy;
        }
        out
    }

    /// Flattens to planar `[3, height, width]` order, the layout the
    /// network consumes.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0f32; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                out[c * hw + i] = self.data[i * 3 + c];
            }
        }
        out
    }

    /// Reads a PNG or portable-pixmap file and scales samples to [0, 1].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let decoded = image::open(path)
            .map_err(|e| Error::data(format!("cannot read image {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        let data = decoded.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
        ImageF32::new(w, h, data)
    }

    /// Writes as 8-bit PNG, clamping and quantising samples.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::data(format!("cannot write image {}: {e}", path.display())))
    }
}

/// The road quadrilateral to lift into a top-down square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevCrop {
    /// Source corners in pixel coordinates, ordered top-left, top-right,
    /// bottom-right, bottom-left of the road region.
    pub corners: [[f64; 2]; 4],
    /// Side length of the square output image.
    pub output_size: usize,
}

impl BevCrop {
    /// Checks convexity, output size, and that all corners lie inside
    /// an image of the given dimensions.
    pub fn validate(&self, image_width: usize, image_height: usize) -> Result<()> {
        if self.output_size < 2 {
            return Err(Error::config(format!(
                "crop output_size must be at least 2, found {}",
                self.output_size
            )));
        }
        for (i, c) in self.corners.iter().enumerate() {
            if !c[0].is_finite() || !c[1].is_finite() {
                return Err(Error::config(format!("crop corner {i} is not finite")));
            }
            if c[0] < 0.0
                || c[1] < 0.0
                || c[0] > (image_width - 1) as f64
                || c[1] > (image_height - 1) as f64
            {
                return Err(Error::config(format!(
                    "crop corner {i} at ({}, {}) lies outside the {image_width} x {image_height} image",
                    c[0], c[1]
                )));
            }
        }
        // Convexity: the signed cross product of consecutive edges must
        // keep one strict sign all the way around.
        let mut sign = 0.0f64;
        for i in 0..4 {
            let a = self.corners[i];
            let b = self.corners[(i + 1) % 4];
            let c = self.corners[(i + 2) % 4];
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            if cross.abs() < 1e-9 {
                return Err(Error::config(
                    "crop corners are degenerate (three points nearly collinear)",
                ));
            }
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return Err(Error::config("crop corners do not form a convex quadrilateral"));
            }
        }
        Ok(())
    }

    /// Corners of the output square that pair with `self.corners`, in
    /// pixel-centre coordinates.
    fn output_corners(&self) -> [[f64; 2]; 4] {
        let s = (self.output_size - 1) as f64;
        [[0.0, 0.0], [s, 0.0], [s, s], [0.0, s]]
    }
}

/// Solves the 3x3 homography `h` (with `h[8] = 1`) mapping each `from`
/// point onto its `to` partner, from the standard eight correspondence
/// equations.
pub(crate) fn solve_homography(from: &[[f64; 2]; 4], to: &[[f64; 2]; 4]) -> Result<[f64; 9]> {
    let mut m = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let [u, v] = from[i];
        let [x, y] = to[i];
        m[2 * i] = [u, v, 1.0, 0.0, 0.0, 0.0, -x * u, -x * v, x];
        m[2 * i + 1] = [0.0, 0.0, 0.0, u, v, 1.0, -y * u, -y * v, y];
    }
    // Gaussian elimination with partial pivoting on the augmented rows.
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .expect("nonempty range");
        if m[pivot][col].abs() < 1e-12 {
            return Err(Error::numeric(
                "homography system is singular; the corner correspondences are degenerate",
            ));
        }
        m.swap(col, pivot);
        let inv = 1.0 / m[col][col];
        for k in col..9 {
            m[col][k] *= inv;
        }
        for row in 0..8 {
            if row != col {
                let f = m[row][col];
                if f != 0.0 {
                    for k in col..9 {
                        m[row][k] -= f * m[col][k];
                    }
                }
            }
        }
    }
    let mut h = [0.0f64; 9];
    for i in 0..8 {
        h[i] = m[i][8];
    }
    h[8] = 1.0;
    Ok(h)
}

/// Applies a homography to a point.
pub(crate) fn apply_homography(h: &[f64; 9], p: [f64; 2]) -> [f64; 2] {
    let w = h[6] * p[0] + h[7] * p[1] + h[8];
    [
        (h[0] * p[0] + h[1] * p[1] + h[2]) / w,
        (h[3] * p[0] + h[4] * p[1] + h[5]) / w,
    ]
}

/// Lifts the crop quadrilateral to a top-down `output_size` square. The
/// four corner pixels of the output reproduce the source corner points
/// exactly; interior pixels are bilinear samples of the source.
pub fn bev_warp(image: &ImageF32, crop: &BevCrop) -> Result<ImageF32> {
    crop.validate(image.width(), image.height())?;
    let h = solve_homography(&crop.output_corners(), &crop.corners)?;
    let s = crop.output_size;
    let mut data = Vec::with_capacity(s * s * 3);
    for v in 0..s {
        for u in 0..s {
            let src = apply_homography(&h, [u as f64, v as f64]);
            data.extend_from_slice(&image.sample_bilinear(src[0], src[1]));
        }
    }
    ImageF32::new(s, s, data)
}

/// Bilinear resize with corner alignment: output corners sample source
/// corners exactly, matching the warp's corner convention.
pub fn resize_bilinear(image: &ImageF32, width: usize, height: usize) -> Result<ImageF32> {
    if width == 0 || height == 0 {
        return Err(Error::shape("resize target must be nonzero"));
    }
    if width == image.width() && height == image.height() {
        return Ok(image.clone());
    }
    let sx = if width > 1 { (image.width() - 1) as f64 / (width - 1) as f64 } else { 0.0 };
    let sy = if height > 1 { (image.height() - 1) as f64 / (height - 1) as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            data.extend_from_slice(&image.sample_bilinear(x as f64 * sx, y as f64 * sy));
        }
    }
    ImageF32::new(width, height, data)
}
